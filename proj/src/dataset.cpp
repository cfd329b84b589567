#include "pdseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "pdseg/errors.hpp"
#include "pdseg/io.hpp"

namespace pdseg::data {

namespace {

void expect_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw FormatError(0, where + ": expected an object");
}

void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw FormatError(0, where + ": unknown key '" + it.key() + "'");
  }
}

const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(0, where + ": missing key '" + key + "'");
  return j.at(key);
}

template <typename T>
T get(const json& j, const char* key, const std::string& where) {
  const json& v = field(j, key, where);
  try {
    if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw FormatError(0, "");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw FormatError(0, "");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw FormatError(0, "");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw FormatError(0, "");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw FormatError(0, where + ": key '" + key + "' has the wrong type");
  }
}

json totals_json(const ClassTotals& t) { return json(std::vector<std::uint64_t>(t.begin(), t.end())); }

ClassTotals totals_from(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != static_cast<std::size_t>(synth::kNumClasses))
    throw FormatError(0, where + ": expected " + std::to_string(synth::kNumClasses) + " totals");
  ClassTotals t{};
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!j[i].is_number_unsigned()) throw FormatError(0, where + ": totals must be unsigned");
    t[i] = j[i].get<std::uint64_t>();
  }
  return t;
}

json split_json(const std::vector<SampleRecord>& split) {
  json arr = json::array();
  for (const SampleRecord& s : split) {
    json objs = json::array();
    for (const ObjectRecord& o : s.objects)
      objs.push_back({{"mask", o.mask}, {"class_id", o.class_id}, {"pixels", o.pixels}});
    arr.push_back({{"id", s.id}, {"rgb", s.rgb}, {"depth", s.depth}, {"objects", objs}});
  }
  return arr;
}

std::vector<SampleRecord> split_from(const json& j, const std::string& where) {
  if (!j.is_array()) throw FormatError(0, where + ": expected an array");
  std::vector<SampleRecord> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string w = where + "[" + std::to_string(i) + "]";
    const json& s = j[i];
    expect_object(s, w);
    reject_unknown(s, {"id", "rgb", "depth", "objects"}, w);
    SampleRecord r;
    r.id = get<std::string>(s, "id", w);
    r.rgb = get<std::string>(s, "rgb", w);
    r.depth = get<std::string>(s, "depth", w);
    const json& objs = field(s, "objects", w);
    if (!objs.is_array()) throw FormatError(0, w + ".objects: expected an array");
    for (std::size_t k = 0; k < objs.size(); ++k) {
      const std::string wo = w + ".objects[" + std::to_string(k) + "]";
      expect_object(objs[k], wo);
      reject_unknown(objs[k], {"mask", "class_id", "pixels"}, wo);
      ObjectRecord o;
      o.mask = get<std::string>(objs[k], "mask", wo);
      o.class_id = get<int>(objs[k], "class_id", wo);
      if (o.class_id < 0 || o.class_id >= synth::kNumClasses)
        throw FormatError(0, wo + ": class_id out of range");
      o.pixels = get<std::uint64_t>(objs[k], "pixels", wo);
      r.objects.push_back(std::move(o));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string sample_id(const char* split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s/%06zu", split, i);
  return buf;
}

}  // namespace

json DatasetManifest::to_json() const {
  json classes = json::array();
  for (int c = 0; c < synth::kNumClasses; ++c) classes.push_back(std::string(synth::class_name(c)));
  return {
      {"format", "pdseg-dataset"},
      {"version", version},
      {"master_seed", master_seed},
      {"height", height},
      {"width", width},
      {"intrinsics",
       {{"fx", intrinsics.fx}, {"fy", intrinsics.fy}, {"cx", intrinsics.cx}, {"cy", intrinsics.cy}}},
      {"classes", classes},
      {"class_pixel_totals", {{"train", totals_json(train_pixels)}, {"val", totals_json(val_pixels)}}},
      {"splits", {{"train", split_json(train)}, {"val", split_json(val)}}},
      {"generator", generator},
  };
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  const std::string w = "manifest";
  expect_object(j, w);
  reject_unknown(j,
                 {"format", "version", "master_seed", "height", "width", "intrinsics", "classes",
                  "class_pixel_totals", "splits", "generator"},
                 w);
  if (get<std::string>(j, "format", w) != "pdseg-dataset")
    throw FormatError(0, "manifest: format must be 'pdseg-dataset'");
  DatasetManifest m;
  m.version = get<int>(j, "version", w);
  if (m.version != kManifestVersion)
    throw FormatError(0, "manifest: unsupported version " + std::to_string(m.version));
  m.master_seed = get<std::uint64_t>(j, "master_seed", w);
  m.height = get<std::size_t>(j, "height", w);
  m.width = get<std::size_t>(j, "width", w);

  const json& k = field(j, "intrinsics", w);
  expect_object(k, "manifest.intrinsics");
  reject_unknown(k, {"fx", "fy", "cx", "cy"}, "manifest.intrinsics");
  m.intrinsics.fx = get<double>(k, "fx", "manifest.intrinsics");
  m.intrinsics.fy = get<double>(k, "fy", "manifest.intrinsics");
  m.intrinsics.cx = get<double>(k, "cx", "manifest.intrinsics");
  m.intrinsics.cy = get<double>(k, "cy", "manifest.intrinsics");

  const json& classes = field(j, "classes", w);
  if (!classes.is_array() || classes.size() != static_cast<std::size_t>(synth::kNumClasses))
    throw FormatError(0, "manifest.classes: expected the 12 class names");
  for (int c = 0; c < synth::kNumClasses; ++c)
    if (!classes[static_cast<std::size_t>(c)].is_string() ||
        classes[static_cast<std::size_t>(c)].get<std::string>() != synth::class_name(c))
      throw FormatError(0, "manifest.classes: unexpected class order");

  const json& totals = field(j, "class_pixel_totals", w);
  expect_object(totals, "manifest.class_pixel_totals");
  reject_unknown(totals, {"train", "val"}, "manifest.class_pixel_totals");
  m.train_pixels = totals_from(field(totals, "train", "manifest.class_pixel_totals"),
                               "manifest.class_pixel_totals.train");
  m.val_pixels = totals_from(field(totals, "val", "manifest.class_pixel_totals"),
                             "manifest.class_pixel_totals.val");

  const json& splits = field(j, "splits", w);
  expect_object(splits, "manifest.splits");
  reject_unknown(splits, {"train", "val"}, "manifest.splits");
  m.train = split_from(field(splits, "train", "manifest.splits"), "manifest.splits.train");
  m.val = split_from(field(splits, "val", "manifest.splits"), "manifest.splits.val");
  if (j.contains("generator")) m.generator = j.at("generator");
  return m;
}

void DatasetManifest::save(const fs::path& path) const {
  io::write_file_atomic(path, to_json().dump(2) + "\n");
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  const std::string text = io::read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(e.byte, path.string() + ": invalid JSON");
  }
  try {
    return from_json(j);
  } catch (const FormatError& e) {
    throw FormatError(e.offset(), path.string() + ": " + e.reason());
  }
}

void DatasetManifest::validate(const fs::path& root) const {
  if (height < 16 || width < 16) throw DataError("manifest image size below 16x16");
  intrinsics.validate();
  auto recount = [&](const std::vector<SampleRecord>& split, const ClassTotals& declared,
                     const char* name) {
    ClassTotals counted{};
    std::set<std::string> ids;
    for (const SampleRecord& r : split) {
      if (!ids.insert(r.id).second) throw DataError("duplicate sample id " + r.id);
      const LoadedSample s = load_sample(root, r);
      if (s.rgb.shape() != Shape{3, height, width})
        throw DataError(r.rgb + ": image size " + shape_str(s.rgb.shape()) +
                        " differs from the manifest");
      if (s.depth.shape() != Shape{height, width})
        throw DataError(r.depth + ": depth size differs from the manifest");
      for (double d : s.depth.data())
        if (!(d > 0)) throw DataError(r.depth + ": depth must be positive");
      std::vector<double> cover(height * width, 0.0);
      for (std::size_t k = 0; k < r.objects.size(); ++k) {
        const ObjectRecord& o = r.objects[k];
        const Tensor& m = s.objects[k].mask;
        if (m.shape() != Shape{height, width})
          throw DataError(o.mask + ": mask size differs from the manifest");
        std::uint64_t n = 0;
        for (std::size_t p = 0; p < m.numel(); ++p) {
          if (m.data()[p] > 0) {
            ++n;
            if (cover[p] > 0) throw DataError(o.mask + ": overlaps another mask of " + r.id);
            cover[p] = 1;
          }
        }
        if (n == 0) throw DataError(o.mask + ": empty mask");
        if (n != o.pixels)
          throw DataError(o.mask + ": " + std::to_string(n) + " pixels, manifest says " +
                          std::to_string(o.pixels));
        counted[static_cast<std::size_t>(o.class_id)] += n;
      }
    }
    for (int c = 0; c < synth::kNumClasses; ++c)
      if (counted[static_cast<std::size_t>(c)] != declared[static_cast<std::size_t>(c)])
        throw DataError(std::string(name) + " pixel total for class " +
                        std::string(synth::class_name(c)) + " is " +
                        std::to_string(counted[static_cast<std::size_t>(c)]) + ", manifest says " +
                        std::to_string(declared[static_cast<std::size_t>(c)]));
  };
  recount(train, train_pixels, "train");
  recount(val, val_pixels, "val");
}

void DatasetConfig::validate() const {
  if (height < 16 || width < 16) throw ConfigError("dataset images must be at least 16x16");
  if (!(min_object_fraction >= 0 && min_object_fraction < 1))
    throw ConfigError("min_object_fraction must lie in [0, 1)");
  scene.validate();
  if (scene.max_objects < 1) throw ConfigError("dataset scenes need at least one object");
}

json DatasetConfig::to_json() const {
  return {{"train", train},
          {"val", val},
          {"height", height},
          {"width", width},
          {"master_seed", master_seed},
          {"min_object_fraction", min_object_fraction},
          {"scene",
           {{"min_objects", scene.min_objects},
            {"max_objects", scene.max_objects},
            {"classes", scene.classes},
            {"occlusion_rate", scene.occlusion_rate},
            {"texture_correlation", scene.texture_correlation},
            {"ground", scene.ground},
            {"min_depth", scene.min_depth},
            {"max_depth", scene.max_depth},
            {"min_scale", scene.min_scale},
            {"max_scale", scene.max_scale}}}};
}

DatasetManifest build_dataset(const DatasetConfig& config, const fs::path& out_dir) {
  config.validate();
  DatasetManifest m;
  m.master_seed = config.master_seed;
  m.height = config.height;
  m.width = config.width;
  m.generator = config.to_json();
  const std::size_t hw = config.height * config.width;
  const auto min_pixels = static_cast<std::size_t>(
      std::ceil(config.min_object_fraction * static_cast<double>(hw)));

  auto make = [&](const char* split, std::size_t local, std::size_t global,
                  ClassTotals& totals) {
    SampleRecord rec;
    rec.id = sample_id(split, local);
    std::uint64_t seed = synth::derive_seed(config.master_seed, global);
    synth::Sample s;
    std::vector<const synth::Instance*> keep;
    // Resample until some object is large enough to annotate.
    for (std::uint64_t attempt = 0;; ++attempt) {
      s = synth::render(synth::random_scene(config.scene, seed), config.height, config.width,
                        m.intrinsics);
      keep.clear();
      for (const synth::Instance& inst : s.instances)
        if (inst.pixels >= std::max<std::size_t>(min_pixels, 1)) keep.push_back(&inst);
      if (!keep.empty()) break;
      if (attempt > 1000) throw DataError("could not generate an annotatable scene");
      seed = synth::derive_seed(seed, attempt + 1);
    }
    rec.rgb = rec.id + "/rgb.ppm";
    rec.depth = rec.id + "/depth.pfm";
    io::save_ppm(out_dir / rec.rgb, s.rgb);
    io::save_pfm(out_dir / rec.depth, s.depth);
    for (std::size_t k = 0; k < keep.size(); ++k) {
      char name[32];
      std::snprintf(name, sizeof name, "/mask_%02zu.pgm", k);
      ObjectRecord o{rec.id + name, keep[k]->class_id, keep[k]->pixels};
      io::save_pgm_mask(out_dir / o.mask, keep[k]->mask);
      totals[static_cast<std::size_t>(o.class_id)] += o.pixels;
      rec.objects.push_back(std::move(o));
    }
    return rec;
  };

  for (std::size_t i = 0; i < config.train; ++i) m.train.push_back(make("train", i, i, m.train_pixels));
  for (std::size_t i = 0; i < config.val; ++i)
    m.val.push_back(make("val", i, config.train + i, m.val_pixels));
  m.save(out_dir / "manifest.json");
  return m;
}

LoadedSample load_sample(const fs::path& root, const SampleRecord& record) {
  LoadedSample s;
  s.id = record.id;
  s.rgb = io::load_ppm(root / record.rgb);
  s.depth = io::load_pfm(root / record.depth);
  for (const ObjectRecord& o : record.objects)
    s.objects.push_back({io::load_pgm_mask(root / o.mask), o.class_id});
  return s;
}

std::vector<LoadedSample> load_split(const fs::path& root, const std::vector<SampleRecord>& split) {
  std::vector<LoadedSample> out;
  out.reserve(split.size());
  for (const SampleRecord& r : split) out.push_back(load_sample(root, r));
  return out;
}

}  // namespace pdseg::data
