#pragma once

// JSON snapshot of a parameterization: its structure string plus flat lambda.

#include "fls/harness/record.hpp"
#include "fls/q_param.hpp"

namespace fls::harness {

inline std::string snapshot_json(const QSpec& spec, const AnyQ& q) {
  const Vector lambda = std::visit([](const auto& x) { return Vector(x.params()); }, q);
  nlohmann::ordered_json j;
  j["structure"] = to_string(spec);
  j["n"] = spec.n;
  j["params"] = std::vector<double>(lambda.data(), lambda.data() + lambda.size());
  return j.dump() + "\n";
}

inline std::pair<QSpec, AnyQ> parse_snapshot(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  const QSpec spec = parse_q_spec(j.at("structure").get<std::string>(), j.at("n").get<Index>());
  AnyQ q = init_scaled_identity(spec, 1.0);
  const auto values = j.at("params").get<std::vector<double>>();
  const Vector lambda = Eigen::Map<const Vector>(values.data(), Index(values.size()));
  std::visit([&](auto& x) { x.set_params(lambda); }, q);
  return {spec, std::move(q)};
}

inline void save_snapshot(const std::filesystem::path& path, const QSpec& spec, const AnyQ& q) {
  write_atomic(path, snapshot_json(spec, q));
}

inline std::pair<QSpec, AnyQ> load_snapshot(const std::filesystem::path& path) {
  return parse_snapshot(read_file(path));
}

}  // namespace fls::harness
