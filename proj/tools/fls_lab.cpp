#include "fls/harness/experiments.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw fls::harness::ConfigError("empty entry in --seeds");
    std::size_t used = 0;
    const unsigned long long v = std::stoull(item, &used);
    if (used != item.size()) throw fls::harness::ConfigError("bad seed '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw fls::harness::ConfigError("--seeds must be nonempty");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace fls::harness;
  CLI::App app{"Synthetic second-order pruning experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, seeds_text;
  int jobs = 1;
  std::string experiment;
  for (const auto& id : experiment_ids()) {
    auto* sub = app.add_subcommand(id, "run the " + id + " experiment");
    sub->add_option("--config", config_path, "key = value config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory (default results/<experiment>)");
    sub->add_option("--seeds", seeds_text, "comma-separated seeds, overrides the config");
    sub->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->callback([&, id] { experiment = id; });
  }
  std::string plot_csv, plot_out;
  auto* plot = app.add_subcommand("plot", "render plots/*.svg from a metrics.csv");
  plot->add_option("csv", plot_csv, "metrics.csv")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", plot_out, "output directory (default: next to the csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (plot->parsed()) {
      const std::filesystem::path csv(plot_csv);
      const std::filesystem::path dir = plot_out.empty() ? csv.parent_path() / "plots" : std::filesystem::path(plot_out);
      const auto written = emit_plots(read_file(csv), dir);
      for (const auto& p : written) std::cout << p.string() << '\n';
      return 0;
    }
    const Config cfg = Config::load(config_path);
    RunOptions opt;
    opt.jobs = jobs;
    if (!seeds_text.empty()) opt.seeds = parse_seed_list(seeds_text);
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentRecord rec = run_experiment(experiment, cfg, opt);
    const std::filesystem::path dir = out_dir.empty() ? std::filesystem::path("results") / experiment : std::filesystem::path(out_dir);
    persist(rec, dir);
    std::cout << summary_text(rec);
    std::cerr << experiment << ": " << rec.metrics.size() << " metric rows in "
              << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s -> "
              << dir.string() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "fls-lab: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
