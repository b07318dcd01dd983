#include "edgs/run_config.hpp"

#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace edgs {

namespace {

struct Entry {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T v;
  char trailing;
  if (!(is >> v) || (is >> trailing))
    throw std::runtime_error("config: bad value for " + key + ": '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw std::runtime_error("config: bad value for " + key + ": '" + value + "'");
}

std::string num_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> r;
    auto size_field = [&](const char* key, std::size_t RunConfig::* f) {
      r.push_back({key,
                   [key, f](RunConfig& c, const std::string& v) {
                     c.*f = parse_number<std::size_t>(key, v);
                   },
                   [f](const RunConfig& c) { return std::to_string(c.*f); }});
    };
    auto double_field = [&](const char* key, double RunConfig::* f) {
      r.push_back({key,
                   [key, f](RunConfig& c, const std::string& v) {
                     c.*f = parse_number<double>(key, v);
                   },
                   [f](const RunConfig& c) { return num_str(c.*f); }});
    };
    auto bool_field = [&](const char* key, bool RunConfig::* f) {
      r.push_back({key,
                   [key, f](RunConfig& c, const std::string& v) { c.*f = parse_bool(key, v); },
                   [f](const RunConfig& c) { return c.*f ? "true" : "false"; }});
    };
    auto string_field = [&](const char* key, std::string RunConfig::* f) {
      r.push_back({key, [f](RunConfig& c, const std::string& v) { c.*f = v; },
                   [f](const RunConfig& c) { return c.*f; }});
    };

    size_field("offsets_per_anchor", &RunConfig::offsets_per_anchor);
    size_field("feature_dim", &RunConfig::feature_dim);
    double_field("voxel_size", &RunConfig::voxel_size);
    bool_field("view_dependent_color", &RunConfig::view_dependent_color);
    string_field("strategy", &RunConfig::strategy);
    double_field("rbf_sigma", &RunConfig::rbf_sigma);
    size_field("knn_k", &RunConfig::knn_k);
    bool_field("use_time_mask", &RunConfig::use_time_mask);
    string_field("render_mode", &RunConfig::render_mode);
    size_field("iterations", &RunConfig::iterations);
    double_field("lambda_ssim", &RunConfig::lambda_ssim);
    double_field("lambda_mask", &RunConfig::lambda_mask);
    size_field("mask_reg_from", &RunConfig::mask_reg_from);
    double_field("lr_features", &RunConfig::lr_features);
    double_field("lr_offsets", &RunConfig::lr_offsets);
    double_field("lr_scales", &RunConfig::lr_scales);
    double_field("lr_heads", &RunConfig::lr_heads);
    double_field("lr_deform", &RunConfig::lr_deform);
    double_field("head_lr_decay", &RunConfig::head_lr_decay);
    size_field("densify_interval", &RunConfig::densify_interval);
    size_field("densify_from", &RunConfig::densify_from);
    size_field("densify_until", &RunConfig::densify_until);
    double_field("densify_grad_threshold", &RunConfig::densify_grad_threshold);
    size_field("densify_subvoxels", &RunConfig::densify_subvoxels);
    double_field("prune_opacity", &RunConfig::prune_opacity);
    r.push_back({"seed",
                 [](RunConfig& c, const std::string& v) {
                   c.seed = parse_number<std::uint64_t>("seed", v);
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    size_field("holdout_every", &RunConfig::holdout_every);
    size_field("log_every", &RunConfig::log_every);
    return r;
  }();
  return entries;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const Entry& e : registry())
    if (key == e.key) {
      e.set(*this, value);
      return;
    }
  throw std::runtime_error("config: unknown key: " + key);
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return from_text(os.str());
}

RunConfig RunConfig::from_text(const std::string& text) {
  std::istringstream in(text);
  RunConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": expected key=value, got: " + line);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const Entry& e : registry()) os << e.key << "=" << e.get(*this) << "\n";
  return os.str();
}

void RunConfig::validate() const {
  if (strategy != "rigid" && strategy != "rbf" && strategy != "cosine" && strategy != "knn")
    throw std::runtime_error("config: unknown strategy: " + strategy);
  if (render_mode != "tiled" && render_mode != "naive")
    throw std::runtime_error("config: unknown render_mode: " + render_mode);
  if (densify_subvoxels != 4 && densify_subvoxels != 8)
    throw std::runtime_error("config: densify_subvoxels must be 4 or 8");
  if (offsets_per_anchor == 0 || feature_dim == 0)
    throw std::runtime_error("config: offsets_per_anchor and feature_dim must be positive");
  if (!(voxel_size > 0)) throw std::runtime_error("config: voxel_size must be positive");
  if (!(rbf_sigma > 0)) throw std::runtime_error("config: rbf_sigma must be positive");
  if (knn_k == 0) throw std::runtime_error("config: knn_k must be positive");
  if (lambda_ssim < 0 || lambda_ssim > 1)
    throw std::runtime_error("config: lambda_ssim must lie in [0,1]");
  if (densify_interval == 0) throw std::runtime_error("config: densify_interval must be positive");
  if (holdout_every == 1)
    throw std::runtime_error("config: holdout_every=1 would hold out every frame");
}

}  // namespace edgs
