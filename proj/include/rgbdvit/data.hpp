#pragma once

// Dataset layout root/<category>/<instance>/<view>_rgb.png + <view>_depth.png,
// trial / k-fold / few-shot splits, sample loading and a procedural RGB-D
// scene generator.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rgbdvit/depthrep.hpp"
#include "rgbdvit/error.hpp"
#include "rgbdvit/fusion.hpp"
#include "rgbdvit/image_io.hpp"
#include "rgbdvit/random.hpp"
#include "rgbdvit/util.hpp"

namespace rgbdvit::data {

namespace fs = std::filesystem;

inline constexpr const char* kRgbSuffix = "_rgb.png";
inline constexpr const char* kDepthSuffix = "_depth.png";
inline constexpr const char* kMetaFile = "dataset.json";

struct Entry {
  std::string category, instance, view;
  fs::path rgb, depth;

  std::string id() const { return category + "/" + instance + "/" + view; }
  std::string instance_key() const { return category + "/" + instance; }
  bool operator==(const Entry&) const = default;
};

inline std::string instance_key_of(const std::string& id) {
  auto pos = id.rfind('/');
  if (pos == std::string::npos) throw InvalidArgument("malformed entry id '" + id + "'");
  return id.substr(0, pos);
}

inline std::string category_of(const std::string& id) {
  auto pos = id.find('/');
  if (pos == std::string::npos) throw InvalidArgument("malformed entry id '" + id + "'");
  return id.substr(0, pos);
}

// How stored depth files are turned into model input. Stored 16-bit depth is
// encoded at load time with `depth_format`; 8-bit color depth files are taken
// as already encoded.
struct DepthSettings {
  depth::DepthFormat format = depth::DepthFormat::surfnorm;
  double d_max = 3.5;
  std::size_t window = 5;
  // Fixed intrinsics, or a focal length with the principal point at the
  // image center (per-crop datasets).
  std::optional<depth::CameraIntrinsics> intrinsics;
  double focal = 570.3;

  depth::CameraIntrinsics intrinsics_for(std::size_t w, std::size_t h) const {
    if (intrinsics) return *intrinsics;
    depth::CameraIntrinsics k = depth::CameraIntrinsics::centered(w, h);
    k.fx = k.fy = focal;
    return k;
  }
  bool operator==(const DepthSettings&) const = default;
};

inline void to_json(nlohmann::json& j, const DepthSettings& d) {
  j = {{"format", depth::to_string(d.format)}, {"d_max", d.d_max}, {"window", d.window}, {"focal", d.focal}};
  if (d.intrinsics) j["intrinsics"] = *d.intrinsics;
}

inline void from_json(const nlohmann::json& j, DepthSettings& d) {
  d = DepthSettings{};
  if (j.contains("format")) d.format = depth::depth_format_from_string(j.at("format").get<std::string>());
  d.d_max = j.value("d_max", 3.5);
  d.window = j.value("window", std::size_t{5});
  d.focal = j.value("focal", 570.3);
  if (j.contains("intrinsics")) d.intrinsics = j.at("intrinsics").get<depth::CameraIntrinsics>();
}

struct DatasetIndex {
  fs::path root;
  std::vector<Entry> entries;
  std::vector<std::string> categories;
  DepthSettings depth;

  int label_of(const std::string& category) const {
    auto it = std::find(categories.begin(), categories.end(), category);
    if (it == categories.end()) throw InvalidArgument("unknown category '" + category + "'");
    return static_cast<int>(it - categories.begin());
  }

  const Entry& find(const std::string& id) const {
    for (const auto& e : entries)
      if (e.id() == id) return e;
    throw InvalidArgument("no entry '" + id + "' in dataset " + root.string());
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& e : entries) out.push_back(e.id());
    return out;
  }

  // Instance names per category, sorted.
  std::map<std::string, std::vector<std::string>> instances() const {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& e : entries) {
      auto& v = out[e.category];
      if (v.empty() || v.back() != e.instance) v.push_back(e.instance);
    }
    return out;
  }

  bool operator==(const DatasetIndex&) const = default;
};

inline void write_metadata(const fs::path& root, const std::vector<std::string>& categories,
                           const DepthSettings& depth, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j = extra;
  j["categories"] = categories;
  j["depth"] = depth;
  write_text(root / kMetaFile, j.dump(2) + "\n");
}

inline std::vector<fs::path> sorted_children(const fs::path& dir, bool dirs) {
  std::vector<fs::path> out;
  for (const auto& de : fs::directory_iterator(dir))
    if (dirs ? de.is_directory() : de.is_regular_file()) out.push_back(de.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Walks the canonical layout in lexicographic order. Category order (and so
// label ids) comes from dataset.json when present, else from directory names.
inline DatasetIndex scan(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root '" + root.string() + "' is not a directory");
  DatasetIndex idx;
  idx.root = root;
  std::optional<std::vector<std::string>> declared;
  if (fs::exists(root / kMetaFile)) {
    auto j = nlohmann::json::parse(read_text(root / kMetaFile));
    if (j.contains("categories")) declared = j.at("categories").get<std::vector<std::string>>();
    if (j.contains("depth")) idx.depth = j.at("depth").get<DepthSettings>();
  }
  std::vector<std::string> orphans;
  std::set<std::string> seen_categories;
  for (const auto& cat : sorted_children(root, true)) {
    const std::string category = cat.filename().string();
    for (const auto& inst : sorted_children(cat, true)) {
      std::set<std::string> rgb_views, depth_views;
      for (const auto& f : sorted_children(inst, false)) {
        std::string name = f.filename().string();
        if (ends_with(name, kRgbSuffix)) rgb_views.insert(name.substr(0, name.size() - std::strlen(kRgbSuffix)));
        else if (ends_with(name, kDepthSuffix))
          depth_views.insert(name.substr(0, name.size() - std::strlen(kDepthSuffix)));
      }
      for (const auto& v : rgb_views)
        if (!depth_views.count(v)) orphans.push_back((inst / (v + kRgbSuffix)).string());
      for (const auto& v : depth_views)
        if (!rgb_views.count(v)) orphans.push_back((inst / (v + kDepthSuffix)).string());
      for (const auto& v : rgb_views)
        if (depth_views.count(v)) {
          idx.entries.push_back({category, inst.filename().string(), v, inst / (v + kRgbSuffix),
                                 inst / (v + kDepthSuffix)});
          seen_categories.insert(category);
        }
    }
  }
  if (!orphans.empty()) {
    std::string msg = "unpaired files in " + root.string() + ":";
    for (const auto& o : orphans) msg += " " + o;
    throw IndexingError(msg);
  }
  if (declared) {
    for (const auto& c : seen_categories)
      if (std::find(declared->begin(), declared->end(), c) == declared->end())
        throw IndexingError("category '" + c + "' is not listed in " + (root / kMetaFile).string());
    idx.categories = *declared;
  } else {
    idx.categories.assign(seen_categories.begin(), seen_categories.end());
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitManifest {
  std::string kind;  // trial | kfold | fewshot
  nlohmann::json params = nlohmann::json::object();
  std::string root;
  std::vector<std::string> train, test;
  bool operator==(const SplitManifest&) const = default;
};

inline void to_json(nlohmann::json& j, const SplitManifest& s) {
  j = {{"kind", s.kind}, {"params", s.params}, {"root", s.root}, {"train", s.train}, {"test", s.test}};
}

inline void from_json(const nlohmann::json& j, SplitManifest& s) {
  s.kind = j.at("kind").get<std::string>();
  s.params = j.value("params", nlohmann::json::object());
  s.root = j.value("root", std::string{});
  s.train = j.at("train").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
}

inline void save_split(const fs::path& path, const SplitManifest& s) {
  write_text(path, nlohmann::json(s).dump(2) + "\n");
}

inline SplitManifest load_split(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path)).get<SplitManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw SplitError("malformed split manifest " + path.string() + ": " + e.what());
  }
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// One held-out instance per category by a seeded draw; `held_out` overrides
// the draw for the categories it names.
inline SplitManifest trial_split(const DatasetIndex& idx, std::uint64_t seed,
                                 const std::map<std::string, std::string>& held_out = {}) {
  auto inst = idx.instances();
  std::map<std::string, std::string> chosen;
  for (const auto& [cat, names] : inst) {
    if (names.size() < 2)
      throw SplitError("category '" + cat + "' has " + std::to_string(names.size()) +
                       " instance(s); a trial split needs at least 2");
    if (auto it = held_out.find(cat); it != held_out.end()) {
      if (std::find(names.begin(), names.end(), it->second) == names.end())
        throw SplitError("override names unknown instance '" + it->second + "' for category '" + cat + "'");
      chosen[cat] = it->second;
    } else {
      Rng rng = derive_rng(seed, fnv1a(cat));
      chosen[cat] = names[uniform_index(rng, names.size())];
    }
  }
  for (const auto& [cat, _] : held_out)
    if (!inst.count(cat)) throw SplitError("override names unknown category '" + cat + "'");
  SplitManifest s;
  s.kind = "trial";
  s.params = {{"seed", seed}, {"held_out", chosen}};
  s.root = idx.root.string();
  for (const auto& e : idx.entries) (chosen[e.category] == e.instance ? s.test : s.train).push_back(e.id());
  return s;
}

// Instances of each category are shuffled and dealt round-robin into k
// folds; fold `fold` is the test set.
inline SplitManifest kfold_split(const DatasetIndex& idx, std::size_t k, std::size_t fold, std::uint64_t seed) {
  if (k < 2) throw SplitError("k-fold needs k >= 2");
  if (fold >= k) throw SplitError("fold " + std::to_string(fold) + " out of range for k=" + std::to_string(k));
  std::set<std::string> test_instances;
  for (auto [cat, names] : idx.instances()) {
    if (names.size() < k)
      throw SplitError("category '" + cat + "' has fewer instances than folds (" + std::to_string(names.size()) +
                       " < " + std::to_string(k) + ")");
    Rng rng = derive_rng(seed, fnv1a(cat));
    shuffle(names, rng);
    for (std::size_t i = 0; i < names.size(); ++i)
      if (i % k == fold) test_instances.insert(cat + "/" + names[i]);
  }
  SplitManifest s;
  s.kind = "kfold";
  s.params = {{"k", k}, {"fold", fold}, {"seed", seed}};
  s.root = idx.root.string();
  for (const auto& e : idx.entries) (test_instances.count(e.instance_key()) ? s.test : s.train).push_back(e.id());
  return s;
}

// Seeded draw of min(shots, available) views per instance. Output keeps the
// input order.
inline std::vector<std::string> few_shot_subset(const std::vector<std::string>& ids, std::size_t shots,
                                                std::uint64_t seed) {
  if (shots < 1) throw SplitError("shots must be at least 1");
  std::map<std::string, std::vector<std::size_t>> by_instance;
  for (std::size_t i = 0; i < ids.size(); ++i) by_instance[instance_key_of(ids[i])].push_back(i);
  std::vector<char> keep(ids.size(), 0);
  for (auto& [key, rows] : by_instance) {
    Rng rng = derive_rng(seed, fnv1a(key));
    shuffle(rows, rng);
    for (std::size_t i = 0; i < std::min(shots, rows.size()); ++i) keep[rows[i]] = 1;
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (keep[i]) out.push_back(ids[i]);
  return out;
}

inline SplitManifest few_shot_split(const SplitManifest& base, std::size_t shots, std::uint64_t seed) {
  SplitManifest s = base;
  s.kind = "fewshot";
  s.params = {{"shots", shots}, {"seed", seed}, {"base", base.params}, {"base_kind", base.kind}};
  s.train = few_shot_subset(base.train, shots, seed);
  return s;
}

// ---------------------------------------------------------------------------
// Loading

template <class T = float>
fusion::RgbdSample<T> load_sample(const DatasetIndex& idx, const Entry& e, const depth::PreprocessSpec& pre) {
  fusion::RgbdSample<T> s;
  s.rgb = depth::preprocess<T>(io::image_from_png(read_file(e.rgb)), pre);
  const auto bytes = read_file(e.depth);
  auto raster = io::decode_png(bytes);
  depth::EncodedImage enc;
  if (io::is_depth16(raster)) {
    auto dm = io::depth_from_raster(raster);
    enc = depth::encode_depth(dm, idx.depth.intrinsics_for(dm.width, dm.height), idx.depth.format, idx.depth.d_max,
                              idx.depth.window);
  } else {
    enc = io::image_from_png(bytes);
  }
  s.depth = depth::preprocess<T>(enc, pre);
  s.label = idx.label_of(e.category);
  auto inst = idx.instances().at(e.category);
  s.instance = static_cast<int>(std::find(inst.begin(), inst.end(), e.instance) - inst.begin());
  s.id = e.id();
  return s;
}

// Loads `ids` with up to `threads` workers over disjoint ranges; output order
// matches `ids`.
template <class T = float>
std::vector<fusion::RgbdSample<T>> load_samples(const DatasetIndex& idx, const std::vector<std::string>& ids,
                                                const depth::PreprocessSpec& pre, std::size_t threads = 0) {
  std::map<std::string, const Entry*> by_id;
  for (const auto& e : idx.entries) by_id[e.id()] = &e;
  std::vector<const Entry*> todo;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw SplitError("split references unknown entry '" + id + "'");
    todo.push_back(it->second);
  }
  std::vector<fusion::RgbdSample<T>> out(todo.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<std::size_t>(threads, std::max<std::size_t>(1, todo.size()));
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < todo.size(); i += threads) out[i] = load_sample<T>(idx, *todo[i], pre);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class Dependence { rgb_separable, depth_separable, joint_only };

inline std::string to_string(Dependence d) {
  switch (d) {
    case Dependence::rgb_separable: return "rgb-separable";
    case Dependence::depth_separable: return "depth-separable";
    case Dependence::joint_only: return "joint-only";
  }
  return "?";
}

inline Dependence dependence_from_string(std::string_view s) {
  if (s == "rgb-separable") return Dependence::rgb_separable;
  if (s == "depth-separable") return Dependence::depth_separable;
  if (s == "joint-only") return Dependence::joint_only;
  throw InvalidArgument("unknown modality dependence '" + std::string(s) + "'");
}

struct SynthConfig {
  std::size_t categories = 5;
  std::size_t instances = 2;
  std::size_t views = 10;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
  Dependence dependence = Dependence::joint_only;
  // "none" stores 16-bit millimeter depth; otherwise a depth format name.
  std::string depth_encoding = "surfnorm";

  void validate() const {
    if (categories < 2) throw InvalidArgument("synthetic data needs at least 2 categories");
    if (instances < 1 || views < 1) throw InvalidArgument("instances and views must be positive");
    if (image_size < 8) throw InvalidArgument("synthetic image size must be at least 8");
    if (depth_encoding != "none") depth::depth_format_from_string(depth_encoding);
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"categories", c.categories}, {"instances", c.instances}, {"views", c.views},
       {"image_size", c.image_size}, {"seed", c.seed},           {"dependence", to_string(c.dependence)},
       {"depth_encoding", c.depth_encoding}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c = SynthConfig{};
  c.categories = j.value("categories", c.categories);
  c.instances = j.value("instances", c.instances);
  c.views = j.value("views", c.views);
  c.image_size = j.value("image_size", c.image_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("dependence")) c.dependence = dependence_from_string(j.at("dependence").get<std::string>());
  c.depth_encoding = j.value("depth_encoding", c.depth_encoding);
}

// Color class and shape class of one rendered view.
struct SceneFactors {
  std::size_t color = 0, shape = 0;
};

// Every (color, shape) combination that may carry `label`. In joint-only mode
// label = (color + shape) mod C, a Latin square: each color (and each shape)
// occurs exactly once with every label.
inline std::vector<SceneFactors> label_map(const SynthConfig& c, std::size_t label) {
  std::vector<SceneFactors> out;
  const std::size_t n = c.categories;
  for (std::size_t col = 0; col < n; ++col)
    for (std::size_t sh = 0; sh < n; ++sh) {
      bool ok = false;
      switch (c.dependence) {
        case Dependence::rgb_separable: ok = col == label; break;
        case Dependence::depth_separable: ok = sh == label; break;
        case Dependence::joint_only: ok = (col + sh) % n == label; break;
      }
      if (ok) out.push_back({col, sh});
    }
  return out;
}

inline SceneFactors draw_factors(const SynthConfig& c, std::size_t label, Rng& rng) {
  auto options = label_map(c, label);
  return options[uniform_index(rng, options.size())];
}

// Saturated hue wheel with C evenly spaced colors.
inline std::array<double, 3> palette(std::size_t color, std::size_t n) {
  double h = 6.0 * static_cast<double>(color) / static_cast<double>(n);
  double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  return rgb;
}

// Height of the object surface toward the camera (meters) at normalized disk
// coordinates (x, y), x^2 + y^2 <= 1. Families beyond the first five reuse
// them with inverted relief.
inline double shape_relief(std::size_t shape, double x, double y) {
  const double a = 0.10 * (shape / 5 % 2 == 0 ? 1.0 : -1.0) * (1.0 + 0.5 * static_cast<double>(shape / 10));
  switch (shape % 5) {
    case 0: return 0.0;
    case 1: return a * (1.0 - x * x - y * y);
    case 2: return a * (1.0 - x * x);
    case 3: return a * (1.0 - y * y);
    default: return a * x;
  }
}

struct RenderedView {
  depth::EncodedImage rgb;
  depth::DepthMap depth;
};

// Per-instance traits. Background, placement and distances are drawn per view
// so they carry no label information across instances.
struct InstanceLook {
  double radius, tint;
};

inline InstanceLook draw_instance(const SynthConfig& c, std::size_t category, std::size_t instance) {
  Rng rng = derive_rng(c.seed, 0x1000 + category * 1009 + instance);
  const double s = static_cast<double>(c.image_size);
  return {s * uniform(rng, 0.27, 0.33), uniform(rng, 0.9, 1.0)};
}

inline RenderedView render_view(const SynthConfig& c, const InstanceLook& look, const SceneFactors& f, Rng& rng) {
  const std::size_t s = c.image_size;
  const double sd = static_cast<double>(s);
  RenderedView out{depth::EncodedImage(s, s), depth::DepthMap(s, s)};
  const double cx = sd / 2 + uniform(rng, -sd / 10, sd / 10), cy = sd / 2 + uniform(rng, -sd / 10, sd / 10);
  const double radius = look.radius * uniform(rng, 0.92, 1.08);
  const double bg_gray = uniform(rng, 30, 90), bg_depth = uniform(rng, 1.4, 1.6), obj_depth = uniform(rng, 0.95, 1.05);
  const double bright = uniform(rng, 0.85, 1.0) * look.tint;
  const auto color = palette(f.color, c.categories);
  for (std::size_t v = 0; v < s; ++v)
    for (std::size_t u = 0; u < s; ++u) {
      double x = (static_cast<double>(u) - cx) / radius;
      double y = (static_cast<double>(v) - cy) / radius;
      bool inside = x * x + y * y <= 1.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double val = inside ? 40.0 + 200.0 * color[ch] * bright : bg_gray;
        out.rgb.at(ch, u, v) = depth::to_u8(val + 3.0 * normal(rng));
      }
      double z = inside ? obj_depth - shape_relief(f.shape, x, y) : bg_depth;
      out.depth.set(u, v, static_cast<float>(z + 0.0005 * normal(rng)));
    }
  return out;
}

struct SynthScene {
  std::string id;
  std::size_t label, color, shape;
};

// Renders the dataset into `out` and returns its index. Identical configs
// produce identical files.
inline DatasetIndex gen_synthetic(const SynthConfig& c, const fs::path& out) {
  c.validate();
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory '" + out.string() + "'");
  const auto k = depth::CameraIntrinsics::centered(c.image_size, c.image_size);
  DepthSettings settings;
  settings.intrinsics = k;
  if (c.depth_encoding != "none") settings.format = depth::depth_format_from_string(c.depth_encoding);

  auto pad = [](std::size_t v, int width) {
    std::string s = std::to_string(v);
    return std::string(static_cast<std::size_t>(std::max<int>(0, width - static_cast<int>(s.size()))), '0') + s;
  };
  std::vector<std::string> categories;
  for (std::size_t y = 0; y < c.categories; ++y) categories.push_back("cat" + pad(y, 2));

  nlohmann::json scenes = nlohmann::json::array();
  for (std::size_t y = 0; y < c.categories; ++y)
    for (std::size_t i = 0; i < c.instances; ++i) {
      const InstanceLook look = draw_instance(c, y, i);
      Rng rng = derive_rng(c.seed, 0x2000000 + y * 100003 + i);
      const std::string inst = "inst" + pad(i, 2);
      for (std::size_t v = 0; v < c.views; ++v) {
        const SceneFactors f = draw_factors(c, y, rng);
        auto view = render_view(c, look, f, rng);
        const std::string vname = "v" + pad(v, 3);
        const fs::path dir = out / categories[y] / inst;
        write_file(dir / (vname + kRgbSuffix), io::png_from_image(view.rgb));
        if (c.depth_encoding == "none")
          write_file(dir / (vname + kDepthSuffix), io::png_from_depth(view.depth));
        else
          write_file(dir / (vname + kDepthSuffix),
                     io::png_from_image(depth::encode_depth(view.depth, k, settings.format, settings.d_max)));
        scenes.push_back({{"id", categories[y] + "/" + inst + "/" + vname}, {"label", y}, {"color", f.color},
                          {"shape", f.shape}});
      }
    }
  write_metadata(out, categories, settings, {{"synthetic", c}, {"scenes", scenes}});
  return scan(out);
}

inline std::vector<SynthScene> load_scenes(const fs::path& root) {
  auto j = nlohmann::json::parse(read_text(root / kMetaFile));
  std::vector<SynthScene> out;
  for (const auto& s : j.at("scenes"))
    out.push_back({s.at("id").get<std::string>(), s.at("label").get<std::size_t>(), s.at("color").get<std::size_t>(),
                   s.at("shape").get<std::size_t>()});
  return out;
}

// ---------------------------------------------------------------------------
// ROD import

// Copies <cat>/<cat>_<inst>/<cat>_<inst>_<video>_<frame>_crop.png and the
// matching _depthcrop.png into the canonical layout as <video>_<frame>_rgb.png
// and _depth.png. Depth crops stay 16-bit millimeters and are encoded at load
// time with a centered principal point and `focal`.
inline DatasetIndex import_rod(const fs::path& src, const fs::path& dst, depth::DepthFormat format,
                               double focal = 570.3) {
  if (!fs::is_directory(src)) throw IoError("ROD root '" + src.string() + "' is not a directory");
  std::vector<std::string> categories, orphans;
  std::size_t copied = 0;
  for (const auto& cat : sorted_children(src, true)) {
    const std::string category = cat.filename().string();
    bool any = false;
    for (const auto& inst : sorted_children(cat, true)) {
      const std::string instance = inst.filename().string();
      const std::string prefix = instance + "_";
      for (const auto& f : sorted_children(inst, false)) {
        std::string name = f.filename().string();
        if (!ends_with(name, "_crop.png") || name.rfind(prefix, 0) != 0) continue;
        std::string view = name.substr(prefix.size(), name.size() - prefix.size() - std::strlen("_crop.png"));
        fs::path depth_src = inst / (prefix + view + "_depthcrop.png");
        if (!fs::exists(depth_src)) {
          orphans.push_back(f.string());
          continue;
        }
        fs::path dir = dst / category / instance;
        fs::create_directories(dir);
        fs::copy_file(f, dir / (view + kRgbSuffix), fs::copy_options::overwrite_existing);
        fs::copy_file(depth_src, dir / (view + kDepthSuffix), fs::copy_options::overwrite_existing);
        ++copied;
        any = true;
      }
    }
    if (any) categories.push_back(category);
  }
  if (!orphans.empty()) {
    std::string msg = "RGB crops without a depth crop:";
    for (const auto& o : orphans) msg += " " + o;
    throw IndexingError(msg);
  }
  DepthSettings settings;
  settings.format = format;
  settings.focal = focal;
  write_metadata(dst, categories, settings, {{"imported_from", src.string()}, {"pairs", copied}});
  return scan(dst);
}

}  // namespace rgbdvit::data
