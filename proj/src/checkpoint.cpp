#include "edgs/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace edgs {

namespace {

constexpr char kMagic[4] = {'E', 'D', 'G', 'S'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF64 = 0;

[[noreturn]] void truncated(const std::string& what) {
  throw std::runtime_error("checkpoint truncated while reading " + what);
}

void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::istream& in, void* p, std::size_t n, const std::string& what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) truncated(what);
}

void write_u64(std::ostream& out, std::uint64_t v) { write_bytes(out, &v, sizeof v); }
void write_u32(std::ostream& out, std::uint32_t v) { write_bytes(out, &v, sizeof v); }
void write_f64(std::ostream& out, double v) { write_bytes(out, &v, sizeof v); }

std::uint64_t read_u64(std::istream& in, const std::string& what) {
  std::uint64_t v;
  read_bytes(in, &v, sizeof v, what);
  return v;
}
std::uint32_t read_u32(std::istream& in, const std::string& what) {
  std::uint32_t v;
  read_bytes(in, &v, sizeof v, what);
  return v;
}
double read_f64(std::istream& in, const std::string& what) {
  double v;
  read_bytes(in, &v, sizeof v, what);
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  write_bytes(out, s.data(), s.size());
}

std::string read_string(std::istream& in, const std::string& what) {
  const std::uint64_t n = read_u64(in, what);
  std::string s(n, '\0');
  if (n) read_bytes(in, s.data(), n, what);
  return s;
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const NamedArray& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

NamedArray& Checkpoint::add(const std::string& name, const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  arrays.push_back({name, shape, std::vector<double>(n, 0.0)});
  return arrays.back();
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  write_bytes(out, kMagic, 4);
  write_u32(out, kVersion);
  write_u64(out, c.iteration);
  write_u64(out, c.offsets_per_anchor);
  write_u64(out, c.feature_dim);
  write_f64(out, c.voxel_size);
  write_string(out, c.config_text);
  write_string(out, c.rng_state);
  write_u64(out, c.arrays.size());
  for (const NamedArray& a : c.arrays) {
    write_string(out, a.name);
    write_bytes(out, &kDtypeF64, 1);
    write_u64(out, a.shape.size());
    for (std::size_t d : a.shape) write_u64(out, d);
    write_bytes(out, a.data.data(), a.data.size() * sizeof(double));
  }
  out.flush();
  if (!out) throw std::runtime_error("short write while saving checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  read_bytes(in, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  const std::uint32_t version = read_u32(in, "version");
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

  Checkpoint c;
  c.iteration = read_u64(in, "iteration");
  c.offsets_per_anchor = read_u64(in, "offsets_per_anchor");
  c.feature_dim = read_u64(in, "feature_dim");
  c.voxel_size = read_f64(in, "voxel_size");
  c.config_text = read_string(in, "config text");
  c.rng_state = read_string(in, "rng state");
  const std::uint64_t n_arrays = read_u64(in, "array count");
  for (std::uint64_t i = 0; i < n_arrays; ++i) {
    NamedArray a;
    a.name = read_string(in, "array name");
    const std::string what = "array '" + a.name + "'";
    std::uint8_t dtype;
    read_bytes(in, &dtype, 1, what);
    if (dtype != kDtypeF64)
      throw std::runtime_error("checkpoint " + what + " has unsupported dtype " +
                               std::to_string(dtype));
    const std::uint64_t ndim = read_u64(in, what);
    std::size_t numel = 1;
    for (std::uint64_t d = 0; d < ndim; ++d) {
      a.shape.push_back(read_u64(in, what));
      numel *= a.shape.back();
    }
    a.data.resize(numel);
    if (numel) read_bytes(in, a.data.data(), numel * sizeof(double), what);
    c.arrays.push_back(std::move(a));
  }
  return c;
}

namespace {

NamedArray pack(const std::string& name, const ad::Tensor& t) {
  return {name, t.shape(), std::vector<double>(t.data(), t.data() + t.numel())};
}

ad::Tensor unpack(const Checkpoint& c, const std::string& name) {
  const NamedArray* a = c.find(name);
  if (!a) throw std::runtime_error("checkpoint missing array '" + name + "'");
  return ad::Tensor(a->shape, a->data);
}

}  // namespace

Checkpoint snapshot_model(AnchorSet& scene, HeadBank& heads) {
  Checkpoint c;
  c.offsets_per_anchor = scene.offsets_per_anchor;
  c.feature_dim = scene.feature_dim;
  c.voxel_size = scene.voxel_size;
  c.arrays.push_back(pack("positions", scene.positions));
  for (const ParamRef& p : learnable_inventory(scene, heads))
    c.arrays.push_back(pack(p.name, *p.tensor));
  return c;
}

void restore_model(const Checkpoint& c, AnchorSet& scene, HeadBank& heads) {
  scene.offsets_per_anchor = c.offsets_per_anchor;
  scene.feature_dim = c.feature_dim;
  scene.voxel_size = c.voxel_size;
  scene.positions = unpack(c, "positions");
  if (scene.positions.rank() != 2 || scene.positions.dim(1) != 3)
    throw std::runtime_error("checkpoint array 'positions' must be {N,3}");

  auto load_mlp = [&](const char* base) {
    Mlp m;
    for (std::size_t l = 0;; ++l) {
      const std::string wname = std::string(base) + ".w" + std::to_string(l);
      if (!c.find(wname)) break;
      m.weights.push_back(unpack(c, wname));
      m.biases.push_back(unpack(c, std::string(base) + ".b" + std::to_string(l)));
    }
    if (m.weights.empty())
      throw std::runtime_error(std::string("checkpoint missing array '") + base + ".w0'");
    return m;
  };
  heads.opacity = load_mlp("opacity");
  heads.color = load_mlp("color");
  heads.scale = load_mlp("scale");
  heads.quat = load_mlp("quat");
  heads.mask = load_mlp("mask");
  heads.deform = load_mlp("deform");
  heads.color_view_dependent = heads.color.in_width() == c.feature_dim + 3;

  for (const ParamRef& p : learnable_inventory(scene, heads)) {
    *p.tensor = unpack(c, p.name);
  }

  // Sanity: widths must agree with the recorded hyperparameters.
  if (heads.offsets() != c.offsets_per_anchor || heads.feature_dim() != c.feature_dim)
    throw std::runtime_error("checkpoint head widths disagree with its hyperparameters");
  const std::size_t n = scene.positions.dim(0);
  if (scene.features.rank() != 2 || scene.features.dim(0) != n ||
      scene.features.dim(1) != c.feature_dim)
    throw std::runtime_error("checkpoint array 'features' has inconsistent shape");
}

}  // namespace edgs
