#include "pdseg/config.hpp"

#include <set>

#include "pdseg/errors.hpp"
#include "pdseg/io.hpp"

namespace pdseg::config {

namespace {

// Strict view of one JSON object: typed optional reads, then `finish`
// rejects every key that was not read.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!matches<T>(v)) throw ConfigError(where_ + "." + key + ": wrong type");
    out = v.get<T>();
  }

  const json* sub(const char* key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

  std::string path(const char* key) const { return where_ + "." + key; }

 private:
  template <typename T>
  static bool matches(const json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      return v.is_boolean();
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v.is_string();
    } else if constexpr (std::is_unsigned_v<T>) {
      return v.is_number_unsigned();
    } else if constexpr (std::is_integral_v<T>) {
      return v.is_number_integer();
    } else if constexpr (std::is_floating_point_v<T>) {
      return v.is_number();
    } else {
      if (!v.is_array()) return false;
      for (const json& e : v)
        if (!matches<typename T::value_type>(e)) return false;
      return true;
    }
  }

  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

json scene_json(const synth::SceneConfig& s) {
  return {{"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"classes", s.classes},
          {"occlusion_rate", s.occlusion_rate},
          {"texture_correlation", s.texture_correlation},
          {"ground", s.ground},
          {"min_depth", s.min_depth},
          {"max_depth", s.max_depth},
          {"min_scale", s.min_scale},
          {"max_scale", s.max_scale},
          {"textured", s.textured}};
}

void read_scene(const json& j, const std::string& where, synth::SceneConfig& s) {
  Section r(j, where);
  r.get("min_objects", s.min_objects);
  r.get("max_objects", s.max_objects);
  r.get("classes", s.classes);
  r.get("occlusion_rate", s.occlusion_rate);
  r.get("texture_correlation", s.texture_correlation);
  r.get("ground", s.ground);
  r.get("min_depth", s.min_depth);
  r.get("max_depth", s.max_depth);
  r.get("min_scale", s.min_scale);
  r.get("max_scale", s.max_scale);
  r.get("textured", s.textured);
  r.finish();
}

std::string motion_name(synth::CameraMotion m) { return m == synth::CameraMotion::wander ? "wander" : "sideways"; }

synth::CameraMotion motion_from_name(const std::string& s) {
  if (s == "wander") return synth::CameraMotion::wander;
  if (s == "sideways") return synth::CameraMotion::sideways;
  throw ConfigError("unknown camera motion '" + s + "' (wander, sideways)");
}

std::string click_name(click::ClickMode m) { return m == click::ClickMode::center ? "center" : "uniform"; }

click::ClickMode click_from_name(const std::string& s) {
  if (s == "center") return click::ClickMode::center;
  if (s == "uniform") return click::ClickMode::uniform;
  throw ConfigError("unknown click mode '" + s + "'");
}

harness::ProviderConfig read_provider(const json& j, const std::string& where,
                                      harness::ProviderConfig c) {
  Section r(j, where);
  std::string kind = harness::provider_name(c.kind);
  r.get("kind", kind);
  c.kind = harness::provider_from_name(kind);
  r.get("sigma", c.sigma);
  r.get("noise_grid", c.noise_grid);
  r.get("affine_jitter", c.affine_jitter);
  r.get("seed", c.seed);
  r.get("checkpoint", c.checkpoint);
  r.get("pattern", c.pattern);
  r.finish();
  return c;
}

harness::ExperimentConfig read_experiment(const json& j, const std::string& where,
                                          harness::ExperimentConfig c) {
  Section r(j, where);
  r.get("name", c.name);
  std::string scenario = harness::scenario_name(c.scenario);
  r.get("scenario", scenario);
  c.scenario = harness::scenario_from_name(scenario);
  if (const json* p = r.sub("provider")) c.provider = read_provider(*p, r.path("provider"), c.provider);
  r.get("split_k", c.split_k);
  if (const json* o = r.sub("optim")) {
    Section q(*o, r.path("optim"));
    q.get("lr", c.optim.lr);
    q.get("beta1", c.optim.beta1);
    q.get("beta2", c.optim.beta2);
    q.get("batch", c.optim.batch);
    q.get("iterations", c.optim.iterations);
    q.finish();
  }
  r.get("seeds", c.seeds);
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("widths", c.widths);
  r.get("decoder_width", c.decoder_width);
  std::string mode = click_name(c.eval_click);
  r.get("eval_click", mode);
  c.eval_click = click_from_name(mode);
  r.finish();
  return c;
}

}  // namespace

json to_json(const data::DatasetConfig& c) {
  json j = c.to_json();
  j["scene"] = scene_json(c.scene);
  return j;
}

data::DatasetConfig dataset_from_json(const json& j) {
  data::DatasetConfig c;
  Section r(j, "dataset");
  r.get("train", c.train);
  r.get("val", c.val);
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("master_seed", c.master_seed);
  r.get("min_object_fraction", c.min_object_fraction);
  if (const json* s = r.sub("scene")) read_scene(*s, "dataset.scene", c.scene);
  r.finish();
  c.validate();
  return c;
}

json to_json(const harness::ProviderConfig& c) {
  return {{"kind", harness::provider_name(c.kind)},
          {"sigma", c.sigma},
          {"noise_grid", c.noise_grid},
          {"affine_jitter", c.affine_jitter},
          {"seed", c.seed},
          {"checkpoint", c.checkpoint},
          {"pattern", c.pattern}};
}

harness::ProviderConfig provider_from_json(const json& j) {
  return read_provider(j, "provider", {});
}

json to_json(const harness::ExperimentConfig& c) {
  return {{"name", c.name},
          {"scenario", harness::scenario_name(c.scenario)},
          {"provider", to_json(c.provider)},
          {"split_k", c.split_k},
          {"optim",
           {{"lr", c.optim.lr},
            {"beta1", c.optim.beta1},
            {"beta2", c.optim.beta2},
            {"batch", c.optim.batch},
            {"iterations", c.optim.iterations}}},
          {"seeds", c.seeds},
          {"height", c.height},
          {"width", c.width},
          {"widths", c.widths},
          {"decoder_width", c.decoder_width},
          {"eval_click", click_name(c.eval_click)}};
}

harness::ExperimentConfig experiment_from_json(const json& j) {
  harness::ExperimentConfig c = read_experiment(j, "experiment", {});
  c.validate();
  return c;
}

json to_json(const harness::MonodepthConfig& c) {
  return {{"depth_widths", c.depth.widths},
          {"depth_decoder_width", c.depth.decoder_width},
          {"min_disparity", c.depth.min_disparity},
          {"max_disparity", c.depth.max_disparity},
          {"pose_widths", c.pose.widths},
          {"pose_output_scale", c.pose.output_scale},
          {"photometric",
           {{"alpha", c.photometric.alpha},
            {"c1", c.photometric.c1},
            {"c2", c.photometric.c2},
            {"window", c.photometric.window},
            {"smoothness_weight", c.photometric.smoothness_weight}}},
          {"adam",
           {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"steps", c.steps},
          {"batch", c.batch},
          {"height", c.height},
          {"width", c.width},
          {"sequences", c.sequences},
          {"frames", c.frames},
          {"stride", c.stride},
          {"step_translation", c.step_translation},
          {"step_rotation", c.step_rotation},
          {"motion", motion_name(c.motion)},
          {"scene", scene_json(c.scene)},
          {"seed", c.seed}};
}

harness::MonodepthConfig monodepth_from_json(const json& j) {
  harness::MonodepthConfig c;
  Section r(j, "monodepth");
  r.get("depth_widths", c.depth.widths);
  r.get("depth_decoder_width", c.depth.decoder_width);
  r.get("min_disparity", c.depth.min_disparity);
  r.get("max_disparity", c.depth.max_disparity);
  r.get("pose_widths", c.pose.widths);
  r.get("pose_output_scale", c.pose.output_scale);
  if (const json* p = r.sub("photometric")) {
    Section q(*p, "monodepth.photometric");
    q.get("alpha", c.photometric.alpha);
    q.get("c1", c.photometric.c1);
    q.get("c2", c.photometric.c2);
    q.get("window", c.photometric.window);
    q.get("smoothness_weight", c.photometric.smoothness_weight);
    q.finish();
  }
  if (const json* a = r.sub("adam")) {
    Section q(*a, "monodepth.adam");
    q.get("lr", c.adam.lr);
    q.get("beta1", c.adam.beta1);
    q.get("beta2", c.adam.beta2);
    q.get("eps", c.adam.eps);
    q.finish();
  }
  r.get("steps", c.steps);
  r.get("batch", c.batch);
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("sequences", c.sequences);
  r.get("frames", c.frames);
  r.get("stride", c.stride);
  r.get("step_translation", c.step_translation);
  r.get("step_rotation", c.step_rotation);
  std::string motion = motion_name(c.motion);
  r.get("motion", motion);
  c.motion = motion_from_name(motion);
  if (const json* s = r.sub("scene")) read_scene(*s, "monodepth.scene", c.scene);
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  json m = json::array();
  for (const auto& e : matrix) m.push_back(config::to_json(e));
  return {{"dataset", config::to_json(dataset)},
          {"experiment", config::to_json(experiment)},
          {"monodepth", config::to_json(monodepth)},
          {"matrix", m}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Section r(j, "config");
  if (const json* d = r.sub("dataset")) c.dataset = dataset_from_json(*d);
  if (const json* e = r.sub("experiment")) c.experiment = experiment_from_json(*e);
  if (const json* m = r.sub("monodepth")) c.monodepth = monodepth_from_json(*m);
  if (const json* m = r.sub("matrix")) {
    if (!m->is_array()) throw ConfigError("config.matrix: expected an array");
    for (std::size_t i = 0; i < m->size(); ++i) {
      harness::ExperimentConfig e =
          read_experiment((*m)[i], "config.matrix[" + std::to_string(i) + "]", c.experiment);
      e.validate();
      c.matrix.push_back(std::move(e));
    }
  }
  r.finish();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON at byte " + std::to_string(e.byte));
  }
  return from_json(j);
}

}  // namespace pdseg::config
