#include "edgs/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "edgs/image_io.hpp"

namespace edgs {

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;
constexpr double kDensityPeak = 2.2;   // optical depth at a central hit
constexpr double kTruncSigmas = 4.0;   // hard falloff cutoff
constexpr double kFrustumNear = 0.1;

Vec3 blob_center_at(const Blob& b, double t) {
  switch (b.motion) {
    case MotionKind::kLinear:
      return b.center + (b.amplitude * t) * b.axis;
    case MotionKind::kCircular:
      return b.center +
             Vec3{b.amplitude * (std::cos(kTau * t) - 1.0), b.amplitude * std::sin(kTau * t),
                  0.0};
    default:
      return b.center;
  }
}

double blob_radius_at(const Blob& b, double t) {
  if (b.motion == MotionKind::kOscillating)
    return b.radius * (1.0 + b.amplitude * std::sin(kTau * t));
  return b.radius;
}

struct RayHit {
  double s;
  double alpha;
  Vec3 color;
  std::size_t blob;
};

Vec3 trace_ray(const SceneSpec& spec, const Vec3& origin, const Vec3& dir, double t) {
  std::vector<RayHit> hits;
  for (std::size_t b = 0; b < spec.blobs.size(); ++b) {
    const Blob& blob = spec.blobs[b];
    const Vec3 c = blob_center_at(blob, t);
    const double r = blob_radius_at(blob, t);
    const double sigma = r / 2.0;
    const Vec3 oc = c - origin;
    const double s = dot(oc, dir);
    if (s <= 0.0) continue;
    const double d2 = dot(oc, oc) - s * s;
    const double cut = kTruncSigmas * sigma;
    if (d2 > cut * cut) continue;
    const double tau = kDensityPeak * std::exp(-d2 / (2.0 * sigma * sigma));
    hits.push_back({s, 1.0 - std::exp(-tau), blob.color, b});
  }
  std::sort(hits.begin(), hits.end(), [](const RayHit& a, const RayHit& b) {
    if (a.s != b.s) return a.s < b.s;
    return a.blob < b.blob;
  });
  Vec3 out{0, 0, 0};
  double T = 1.0;
  for (const RayHit& h : hits) {
    out = out + (T * h.alpha) * h.color;
    T *= 1.0 - h.alpha;
  }
  return out;
}

Vec3 subray_dir(const CameraFrame& cam, double sx, double sy) {
  const Vec3 d{(sx - cam.cx) / cam.fx, (sy - cam.cy) / cam.fy, 1.0};
  return normalized(matTvec(cam.rotation, d));
}

}  // namespace

const char* motion_kind_name(MotionKind k) {
  switch (k) {
    case MotionKind::kStatic: return "static";
    case MotionKind::kLinear: return "linear";
    case MotionKind::kCircular: return "circular";
    case MotionKind::kOscillating: return "oscillating";
  }
  return "?";
}

MotionKind parse_motion_kind(const std::string& name) {
  if (name == "static") return MotionKind::kStatic;
  if (name == "linear") return MotionKind::kLinear;
  if (name == "circular") return MotionKind::kCircular;
  if (name == "oscillating") return MotionKind::kOscillating;
  throw std::runtime_error("unknown motion kind: " + name);
}

std::size_t SceneSpec::n_dynamic() const {
  std::size_t n = 0;
  for (const Blob& b : blobs)
    if (b.motion != MotionKind::kStatic) ++n;
  return n;
}

void SceneSpec::validate() const {
  if (blobs.empty()) throw std::runtime_error("scene spec: need at least one blob");
  if (n_timesteps < 2) throw std::runtime_error("scene spec: need at least 2 timesteps");
  if (n_cameras < 1) throw std::runtime_error("scene spec: need at least 1 camera");
  if (width < 8 || height < 8) throw std::runtime_error("scene spec: image too small");
  if (points_per_blob < 50)
    throw std::runtime_error("scene spec: need at least 50 points per blob");
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    const Blob& b = blobs[i];
    if (!(b.radius > 0.0))
      throw std::runtime_error("scene spec: blob " + std::to_string(i) +
                               " needs a positive radius");
    if (b.motion != MotionKind::kStatic && !(b.amplitude > 0.0))
      throw std::runtime_error("scene spec: dynamic blob " + std::to_string(i) +
                               " needs a positive amplitude");
    if (b.motion == MotionKind::kOscillating && b.amplitude >= 1.0)
      throw std::runtime_error("scene spec: oscillating blob " + std::to_string(i) +
                               " amplitude must stay below 1");
  }
}

CameraFrame look_at_camera(const Vec3& position, const Vec3& target, double fx, double fy,
                           std::size_t width, std::size_t height) {
  const Vec3 forward = normalized(target - position);
  Vec3 right = cross(forward, Vec3{0, 1, 0});
  const double rn = norm(right);
  if (rn < 1e-9) right = Vec3{1, 0, 0};  // looking straight along y
  else right = (1.0 / rn) * right;
  const Vec3 down = cross(forward, right);
  CameraFrame cam;
  for (int c = 0; c < 3; ++c) {
    cam.rotation[c] = right[c];
    cam.rotation[3 + c] = down[c];
    cam.rotation[6 + c] = forward[c];
  }
  const Vec3 rp = matvec(cam.rotation, position);
  cam.translation = Vec3{-rp[0], -rp[1], -rp[2]};
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.width = width;
  cam.height = height;
  return cam;
}

Image render_blobs(const SceneSpec& spec, const CameraFrame& cam, double t) {
  Image img(cam.width, cam.height);
  const Vec3 origin = cam.center();
  for (std::size_t y = 0; y < cam.height; ++y)
    for (std::size_t x = 0; x < cam.width; ++x) {
      Vec3 acc{0, 0, 0};
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const Vec3 dir =
              subray_dir(cam, x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy);
          acc = acc + trace_ray(spec, origin, dir, t);
        }
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = acc[c] / 4.0;
    }
  return img;
}

Vec3 SyntheticScene::blob_center(std::size_t b, double t) const {
  return blob_center_at(spec.blobs.at(b), t);
}

double SyntheticScene::blob_radius(std::size_t b, double t) const {
  return blob_radius_at(spec.blobs.at(b), t);
}

Vec3 SyntheticScene::point_position(std::size_t i, double t) const {
  const std::size_t b = point_blob.at(i);
  return blob_center(b, t) + blob_radius(b, t) * point_dir[i];
}

Vec3 SyntheticScene::point_displacement(std::size_t i, double t) const {
  return point_position(i, t) - point_position(i, 0.0);
}

std::vector<bool> SyntheticScene::static_pixel_mask(std::size_t camera) const {
  const CameraFrame& cam = frames.at(frame_index(camera, 0));
  const Vec3 origin = cam.center();
  std::vector<bool> is_static(cam.width * cam.height, true);
  for (std::size_t y = 0; y < cam.height; ++y)
    for (std::size_t x = 0; x < cam.width; ++x) {
      bool touched = false;
      for (int sy = 0; sy < 2 && !touched; ++sy)
        for (int sx = 0; sx < 2 && !touched; ++sx) {
          const Vec3 dir = subray_dir(cam, x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy);
          for (std::size_t ti = 0; ti < spec.n_timesteps && !touched; ++ti) {
            const double t = time_of(ti);
            for (std::size_t b = 0; b < spec.blobs.size(); ++b) {
              if (spec.blobs[b].motion == MotionKind::kStatic) continue;
              const Vec3 c = blob_center(b, t);
              const double sigma = blob_radius(b, t) / 2.0;
              const Vec3 oc = c - origin;
              const double s = dot(oc, dir);
              if (s <= 0.0) continue;
              const double d2 = dot(oc, oc) - s * s;
              const double cut = kTruncSigmas * sigma;
              if (d2 <= cut * cut) {
                touched = true;
                break;
              }
            }
          }
        }
      if (touched) is_static[y * cam.width + x] = false;
    }
  return is_static;
}

SyntheticScene generate(const SceneSpec& spec) {
  spec.validate();
  SyntheticScene scene;
  scene.spec = spec;

  // Camera arc around +z, looking at the origin.
  std::vector<CameraFrame> cams;
  for (std::size_t c = 0; c < spec.n_cameras; ++c) {
    const double span = spec.camera_spread_deg * std::numbers::pi / 180.0;
    const double theta =
        spec.n_cameras == 1
            ? 0.0
            : -span / 2.0 + span * static_cast<double>(c) /
                                static_cast<double>(spec.n_cameras - 1);
    const Vec3 pos{spec.camera_distance * std::sin(theta), 0.0,
                   spec.camera_distance * std::cos(theta)};
    cams.push_back(
        look_at_camera(pos, Vec3{0, 0, 0}, spec.focal, spec.focal, spec.width, spec.height));
  }

  // Every blob must stay fully inside every camera's view at every timestep.
  for (std::size_t ti = 0; ti < spec.n_timesteps; ++ti) {
    const double t =
        static_cast<double>(ti) / static_cast<double>(spec.n_timesteps - 1);
    for (std::size_t ci = 0; ci < cams.size(); ++ci)
      for (std::size_t b = 0; b < spec.blobs.size(); ++b) {
        const Vec3 c = blob_center_at(spec.blobs[b], t);
        const double r = blob_radius_at(spec.blobs[b], t);
        const Vec3 pc = cams[ci].to_camera(c);
        const double margin_u = spec.focal * r / pc[2];
        const double u = spec.focal * pc[0] / pc[2] + cams[ci].cx;
        const double v = spec.focal * pc[1] / pc[2] + cams[ci].cy;
        if (pc[2] - r < kFrustumNear || u - margin_u < 0.0 ||
            u + margin_u > static_cast<double>(spec.width) || v - margin_u < 0.0 ||
            v + margin_u > static_cast<double>(spec.height))
          throw std::runtime_error("blob " + std::to_string(b) +
                                   " escapes the view frustum of camera " +
                                   std::to_string(ci) + " at t=" + std::to_string(t));
      }
  }

  // Surface point cloud at t=0.
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t b = 0; b < spec.blobs.size(); ++b) {
    const Blob& blob = spec.blobs[b];
    for (std::size_t i = 0; i < spec.points_per_blob; ++i) {
      const double z = 2.0 * u01(rng) - 1.0;
      const double phi = kTau * u01(rng);
      const double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
      const Vec3 dir{rxy * std::cos(phi), rxy * std::sin(phi), z};
      const Vec3 p = blob.center + blob.radius * dir;
      scene.init_cloud.points.push_back({p[0], p[1], p[2]});
      scene.init_cloud.colors.push_back({blob.color[0], blob.color[1], blob.color[2]});
      scene.labels.push_back(blob.motion == MotionKind::kStatic ? 0 : 1);
      scene.point_blob.push_back(b);
      scene.point_dir.push_back(dir);
    }
  }

  for (std::size_t c = 0; c < spec.n_cameras; ++c)
    for (std::size_t ti = 0; ti < spec.n_timesteps; ++ti) {
      CameraFrame frame = cams[c];
      frame.t = scene.time_of(ti);
      scene.frames.push_back(frame);
      scene.images.push_back(render_blobs(spec, frame, frame.t));
    }
  return scene;
}

SceneSpec blobs_v1() {
  SceneSpec spec;
  spec.seed = 42;
  auto add = [&](Vec3 c, double r, Vec3 col) {
    Blob b;
    b.center = c;
    b.radius = r;
    b.color = col;
    spec.blobs.push_back(b);
  };
  add({-1.3, -0.8, 0.2}, 0.50, {0.85, 0.30, 0.25});
  add({1.3, -0.85, -0.3}, 0.45, {0.25, 0.55, 0.85});
  add({0.0, 1.15, -0.5}, 0.50, {0.30, 0.80, 0.40});
  add({-1.1, 0.85, 0.5}, 0.40, {0.90, 0.75, 0.25});
  add({1.05, 0.9, 0.55}, 0.42, {0.70, 0.35, 0.80});
  add({0.05, -1.25, 0.6}, 0.40, {0.35, 0.75, 0.75});

  Blob walker;
  walker.center = {-0.5, 0.05, 0.0};
  walker.radius = 0.42;
  walker.color = {0.95, 0.55, 0.20};
  walker.motion = MotionKind::kLinear;
  walker.axis = normalized(Vec3{1.0, 0.25, 0.15});
  walker.amplitude = 0.9;
  spec.blobs.push_back(walker);

  Blob breather;
  breather.center = {0.55, 0.15, -1.0};
  breather.radius = 0.45;
  breather.color = {0.95, 0.30, 0.60};
  breather.motion = MotionKind::kOscillating;
  breather.amplitude = 0.35;
  spec.blobs.push_back(breather);
  return spec;
}

namespace {

std::string frame_name(std::size_t c, std::size_t ti) {
  return "cam" + std::to_string(c) + "_t" + std::to_string(ti) + ".ppm";
}

void write_kv(std::ostream& out, const std::string& key, const std::string& value) {
  out << key << "=" << value << "\n";
}

std::string vec_str(const Vec3& v) {
  std::ostringstream os;
  os.precision(17);
  os << v[0] << " " << v[1] << " " << v[2];
  return os.str();
}

Vec3 parse_vec(const std::string& s, const std::string& key) {
  std::istringstream is(s);
  Vec3 v;
  if (!(is >> v[0] >> v[1] >> v[2]))
    throw std::runtime_error("scene spec: bad vector for " + key);
  return v;
}

}  // namespace

void save_scene(const SyntheticScene& scene, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "frames");
  const SceneSpec& spec = scene.spec;

  std::ofstream out(fs::path(dir) / "spec.txt");
  if (!out) throw std::runtime_error("cannot write scene spec in " + dir);
  out.precision(17);
  write_kv(out, "n_timesteps", std::to_string(spec.n_timesteps));
  write_kv(out, "n_cameras", std::to_string(spec.n_cameras));
  write_kv(out, "width", std::to_string(spec.width));
  write_kv(out, "height", std::to_string(spec.height));
  write_kv(out, "seed", std::to_string(spec.seed));
  out << "camera_distance=" << spec.camera_distance << "\n";
  out << "camera_spread_deg=" << spec.camera_spread_deg << "\n";
  out << "focal=" << spec.focal << "\n";
  write_kv(out, "points_per_blob", std::to_string(spec.points_per_blob));
  write_kv(out, "n_blobs", std::to_string(spec.blobs.size()));
  for (std::size_t b = 0; b < spec.blobs.size(); ++b) {
    const std::string p = "blob" + std::to_string(b) + ".";
    const Blob& blob = spec.blobs[b];
    write_kv(out, p + "center", vec_str(blob.center));
    out << p << "radius=" << blob.radius << "\n";
    write_kv(out, p + "color", vec_str(blob.color));
    write_kv(out, p + "motion", motion_kind_name(blob.motion));
    out << p << "amplitude=" << blob.amplitude << "\n";
    write_kv(out, p + "axis", vec_str(blob.axis));
  }

  scene.init_cloud.save((fs::path(dir) / "cloud.txt").string());

  std::ofstream lab(fs::path(dir) / "labels.txt");
  for (int l : scene.labels) lab << l << "\n";

  std::ofstream cameras(fs::path(dir) / "cameras.txt");
  cameras.precision(17);
  for (std::size_t c = 0; c < spec.n_cameras; ++c)
    for (std::size_t ti = 0; ti < spec.n_timesteps; ++ti) {
      const CameraFrame& f = scene.frames[scene.frame_index(c, ti)];
      cameras << c << " " << ti << " " << f.fx << " " << f.fy << " " << f.cx << " " << f.cy;
      for (double r : f.rotation) cameras << " " << r;
      for (double t : f.translation) cameras << " " << t;
      cameras << "\n";
      write_ppm(scene.images[scene.frame_index(c, ti)],
                (fs::path(dir) / "frames" / frame_name(c, ti)).string());
    }
}

SyntheticScene load_scene(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "spec.txt");
  if (!in) throw std::runtime_error("cannot open scene spec in " + dir);

  SceneSpec spec;
  spec.blobs.clear();
  std::size_t n_blobs = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("scene spec: expected key=value, got: " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "n_timesteps") spec.n_timesteps = std::stoul(value);
    else if (key == "n_cameras") spec.n_cameras = std::stoul(value);
    else if (key == "width") spec.width = std::stoul(value);
    else if (key == "height") spec.height = std::stoul(value);
    else if (key == "seed") spec.seed = std::stoull(value);
    else if (key == "camera_distance") spec.camera_distance = std::stod(value);
    else if (key == "camera_spread_deg") spec.camera_spread_deg = std::stod(value);
    else if (key == "focal") spec.focal = std::stod(value);
    else if (key == "points_per_blob") spec.points_per_blob = std::stoul(value);
    else if (key == "n_blobs") {
      n_blobs = std::stoul(value);
      spec.blobs.resize(n_blobs);
    } else if (key.rfind("blob", 0) == 0) {
      const auto dotpos = key.find('.');
      if (dotpos == std::string::npos)
        throw std::runtime_error("scene spec: unknown key: " + key);
      const std::size_t b = std::stoul(key.substr(4, dotpos - 4));
      if (b >= spec.blobs.size())
        throw std::runtime_error("scene spec: blob index out of range in: " + key);
      const std::string field = key.substr(dotpos + 1);
      Blob& blob = spec.blobs[b];
      if (field == "center") blob.center = parse_vec(value, key);
      else if (field == "radius") blob.radius = std::stod(value);
      else if (field == "color") blob.color = parse_vec(value, key);
      else if (field == "motion") blob.motion = parse_motion_kind(value);
      else if (field == "amplitude") blob.amplitude = std::stod(value);
      else if (field == "axis") blob.axis = parse_vec(value, key);
      else throw std::runtime_error("scene spec: unknown key: " + key);
    } else {
      throw std::runtime_error("scene spec: unknown key: " + key);
    }
  }
  spec.validate();

  SyntheticScene scene;
  scene.spec = spec;
  scene.init_cloud = PointCloud::load((fs::path(dir) / "cloud.txt").string());

  std::ifstream lab(fs::path(dir) / "labels.txt");
  if (!lab) throw std::runtime_error("cannot open labels.txt in " + dir);
  int l;
  while (lab >> l) scene.labels.push_back(l);
  if (scene.labels.size() != scene.init_cloud.points.size())
    throw std::runtime_error("labels.txt does not match cloud.txt in " + dir);

  // Point-to-blob assignment is positional: points_per_blob per blob, in order.
  for (std::size_t i = 0; i < scene.init_cloud.points.size(); ++i) {
    const std::size_t b = i / spec.points_per_blob;
    if (b >= spec.blobs.size())
      throw std::runtime_error("cloud.txt has more points than spec.txt allows in " + dir);
    scene.point_blob.push_back(b);
    const Vec3 p{scene.init_cloud.points[i][0], scene.init_cloud.points[i][1],
                 scene.init_cloud.points[i][2]};
    scene.point_dir.push_back(normalized(p - spec.blobs[b].center));
  }

  scene.frames.resize(spec.n_cameras * spec.n_timesteps);
  scene.images.resize(scene.frames.size());
  std::ifstream cameras(fs::path(dir) / "cameras.txt");
  if (!cameras) throw std::runtime_error("cannot open cameras.txt in " + dir);
  std::size_t rows = 0;
  while (std::getline(cameras, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t c, ti;
    CameraFrame f;
    if (!(ls >> c >> ti >> f.fx >> f.fy >> f.cx >> f.cy))
      throw std::runtime_error("cameras.txt: bad line: " + line);
    for (double& r : f.rotation)
      if (!(ls >> r)) throw std::runtime_error("cameras.txt: bad rotation: " + line);
    for (double& t : f.translation)
      if (!(ls >> t)) throw std::runtime_error("cameras.txt: bad translation: " + line);
    if (c >= spec.n_cameras || ti >= spec.n_timesteps)
      throw std::runtime_error("cameras.txt: frame out of range: " + line);
    f.width = spec.width;
    f.height = spec.height;
    f.t = scene.time_of(ti);
    const std::size_t idx = scene.frame_index(c, ti);
    scene.frames[idx] = f;
    scene.images[idx] = read_ppm((fs::path(dir) / "frames" / frame_name(c, ti)).string());
    ++rows;
  }
  if (rows != scene.frames.size())
    throw std::runtime_error("cameras.txt lists " + std::to_string(rows) + " frames, expected " +
                             std::to_string(scene.frames.size()));
  return scene;
}

}  // namespace edgs
