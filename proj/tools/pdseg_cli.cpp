#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pdseg/config.hpp"
#include "pdseg/dataset.hpp"
#include "pdseg/errors.hpp"
#include "pdseg/harness.hpp"
#include "pdseg/io.hpp"
#include "pdseg/models.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace pdseg;

namespace {

constexpr const char* kVersion = PDSEG_VERSION;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string manifest;
  std::string checkpoint;
  std::string click_mode;
  std::string scenario;
  std::string provider;
  std::optional<std::size_t> split_k;
  std::string report;
};

int exit_code(const Error& e) {
  const std::string& k = e.kind();
  if (k == "ConfigError") return 2;
  if (k == "IoError" || k == "FormatError" || k == "DataError") return 3;
  if (k == "NumericError" || k == "DegenerateBatchError" || k == "DegenerateMetricError") return 4;
  return 1;
}

void fail_line(const std::string& kind, std::string message) {
  for (char& c : message)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << "error: " << kind << ": " << message << std::endl;
}

void progress(const std::string& s) { std::cout << s << std::endl; }

config::RunConfig load_config(const Options& o) {
  return o.config.empty() ? config::RunConfig{} : config::RunConfig::load(o.config);
}

void apply_overrides(harness::ExperimentConfig& e, const Options& o) {
  if (!o.scenario.empty()) e.scenario = harness::scenario_from_name(o.scenario);
  if (!o.provider.empty()) e.provider.kind = harness::provider_from_name(o.provider);
  if (o.split_k) e.split_k = *o.split_k;
  if (!o.click_mode.empty()) {
    if (o.click_mode == "center") e.eval_click = click::ClickMode::center;
    else if (o.click_mode == "uniform") e.eval_click = click::ClickMode::uniform;
    else throw ConfigError("unknown click mode '" + o.click_mode + "'");
  }
  if (o.seed) e.seeds = {*o.seed};
  e.validate();
}

fs::path require_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  return o.out;
}

struct Dataset {
  data::DatasetManifest manifest;
  fs::path root;
};

// Loads and fully validates a manifest before any training starts.
Dataset open_dataset(const Options& o) {
  if (o.manifest.empty()) throw ConfigError("--manifest is required");
  Dataset d{data::DatasetManifest::load(o.manifest), fs::path(o.manifest).parent_path()};
  if (d.root.empty()) d.root = ".";
  d.manifest.validate(d.root);
  return d;
}

void write_json(const fs::path& p, const json& j) { io::write_file_atomic(p, j.dump(2) + "\n"); }

void write_provenance(const fs::path& dir, const std::string& command, const json& cfg,
                      std::optional<std::uint64_t> seed) {
  json p = {{"command", command},
            {"config", cfg},
            {"config_hash", harness::config_hash(cfg)},
            {"seed", seed ? json(*seed) : json(nullptr)},
            {"versions",
             {{"pdseg", kVersion},
              {"report_format", harness::kReportVersion},
              {"checkpoint_format", models::kCheckpointVersion},
              {"compiler", __VERSION__}}}};
  write_json(dir / "provenance.json", p);
}

int cmd_synth(const Options& o) {
  config::RunConfig c = load_config(o);
  if (o.seed) c.dataset.master_seed = *o.seed;
  c.dataset.validate();
  const fs::path out = require_out(o);
  const data::DatasetManifest m = data::build_dataset(c.dataset, out);
  const json cfg = config::to_json(c.dataset);
  write_provenance(out, "synth", cfg, c.dataset.master_seed);
  progress("wrote " + std::to_string(m.train.size()) + " train and " +
           std::to_string(m.val.size()) + " val samples to " + out.string());
  return 0;
}

int cmd_train_depth(const Options& o) {
  config::RunConfig c = load_config(o);
  if (o.seed) c.monodepth.seed = *o.seed;
  c.monodepth.validate();
  const fs::path out = require_out(o);
  const harness::MonodepthConfig& m = c.monodepth;
  const auto sequences = harness::make_sequence_corpus(m, m.seed, m.sequences);
  std::vector<double> seen_loss;
  const harness::MonodepthResult r =
      harness::train_monodepth(m, sequences, [&](std::size_t step, double loss) {
        seen_loss.push_back(loss);
        if (step % 100 == 0 || step == m.steps)
          progress("step " + std::to_string(step) + " loss " +
                   std::to_string(harness::smoothed_loss(seen_loss, step)));
      });
  fs::create_directories(out);
  models::save_checkpoint(out / "monodepth.ckpt", r.checkpoint);
  json history = {{"loss", r.loss},
                  {"photometric_loss", r.photometric_loss},
                  {"smoothed_photometric_first", harness::smoothed_loss(r.photometric_loss,
                                                                        std::min<std::size_t>(10, m.steps))},
                  {"smoothed_photometric_final",
                   harness::smoothed_loss(r.photometric_loss, r.photometric_loss.size())}};
  write_json(out / "train_depth.json", history);
  write_provenance(out, "train-depth", config::to_json(m), m.seed);
  return 0;
}

int cmd_infer_depth(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const fs::path out = require_out(o);
  const Dataset d = open_dataset(o);
  const models::Checkpoint ckpt = models::load_checkpoint(o.checkpoint);
  const models::DepthNet net = harness::depth_net_from(ckpt);
  std::size_t n = 0;
  for (const auto* split : {&d.manifest.train, &d.manifest.val})
    for (const data::SampleRecord& rec : *split) {
      const data::LoadedSample s = data::load_sample(d.root, rec);
      const std::size_t h = s.rgb.size(1), w = s.rgb.size(2);
      const Tensor depth = reshape(net.depth(reshape(s.rgb, Shape{1, 3, h, w})), Shape{h, w});
      const fs::path p = out / (rec.id + ".pfm");
      fs::create_directories(p.parent_path());
      io::save_pfm(p, depth.detach());
      ++n;
    }
  write_provenance(out, "infer-depth", {{"checkpoint", o.checkpoint}, {"manifest", o.manifest}},
                   std::nullopt);
  progress("wrote " + std::to_string(n) + " depth maps to " + out.string());
  return 0;
}

int cmd_train_seg(const Options& o) {
  config::RunConfig c = load_config(o);
  harness::ExperimentConfig& e = c.experiment;
  if (!o.checkpoint.empty()) e.provider.checkpoint = o.checkpoint;
  apply_overrides(e, o);
  const fs::path out = require_out(o);
  const Dataset d = open_dataset(o);
  const harness::SplitSpec split = harness::make_split(d.manifest.train_pixels, e.split_k);
  std::optional<harness::DepthProvider> provider;
  if (harness::uses_depth(e.scenario)) provider.emplace(e.provider, d.root);
  const auto train = harness::prepare(data::load_split(d.root, d.manifest.train), e.scenario,
                                      provider ? &*provider : nullptr);
  const std::uint64_t seed = e.seeds.front();
  const harness::SegTrainResult r =
      harness::train_segmentor(e, seed, train, split, [&](std::size_t step, double loss) {
        if (step % 100 == 0 || step == e.optim.iterations)
          progress("step " + std::to_string(step) + " loss " + std::to_string(loss));
      });
  fs::create_directories(out);
  models::save_checkpoint(out / "segmentor.ckpt", r.model.checkpoint());
  write_json(out / "train_seg.json",
             {{"loss", r.loss},
              {"seen", split.seen},
              {"unseen", split.unseen},
              {"train_classes", std::vector<int>(r.classes_in_batches.begin(),
                                                 r.classes_in_batches.end())}});
  write_provenance(out, "train-seg", config::to_json(e), seed);
  return 0;
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

int cmd_eval(const Options& o) {
  config::RunConfig c = load_config(o);
  harness::ExperimentConfig& e = c.experiment;
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const fs::path out = require_out(o);
  const harness::Segmentor model(models::load_checkpoint(o.checkpoint));
  e.scenario = model.scenario();
  Options rest = o;
  rest.scenario.clear();
  apply_overrides(e, rest);
  const Dataset d = open_dataset(o);
  const harness::SplitSpec split = harness::make_split(d.manifest.train_pixels, e.split_k);
  std::optional<harness::DepthProvider> provider;
  if (harness::uses_depth(e.scenario)) provider.emplace(e.provider, d.root);
  const auto val = harness::prepare(data::load_split(d.root, d.manifest.val), e.scenario,
                                    provider ? &*provider : nullptr);
  const std::uint64_t seed = e.seeds.front();
  const harness::EvalResult r = harness::evaluate(model, val, split, e.eval_click, seed);
  json objects = json::array();
  for (const harness::ObjectResult& x : r.objects)
    objects.push_back({{"image", x.image_id},
                       {"object", x.object_index},
                       {"class_id", x.class_id},
                       {"seen", x.seen},
                       {"click", {x.click.row, x.click.col}},
                       {"iou", x.iou},
                       {"iou_raw", x.iou_raw}});
  fs::create_directories(out);
  write_json(out / "eval.json", {{"checkpoint", o.checkpoint},
                                 {"scenario", harness::scenario_name(e.scenario)},
                                 {"split_k", e.split_k},
                                 {"click_mode", e.eval_click == click::ClickMode::center ? "center" : "uniform"},
                                 {"iou_seen", opt(r.iou_seen)},
                                 {"iou_unseen", opt(r.iou_unseen)},
                                 {"delta_percent", opt(r.delta_percent)},
                                 {"iou_seen_raw", opt(r.iou_seen_raw)},
                                 {"iou_unseen_raw", opt(r.iou_unseen_raw)},
                                 {"objects", objects}});
  write_provenance(out, "eval", config::to_json(e), seed);
  progress("IoU seen " + opt(r.iou_seen).dump() + " unseen " + opt(r.iou_unseen).dump() +
           " delta% " + opt(r.delta_percent).dump());
  return 0;
}

int cmd_matrix(const Options& o) {
  config::RunConfig c = load_config(o);
  std::vector<harness::ExperimentConfig> rows = c.matrix;
  if (rows.empty()) rows.push_back(c.experiment);
  for (harness::ExperimentConfig& e : rows) apply_overrides(e, o);
  const fs::path out = require_out(o);
  const Dataset d = open_dataset(o);
  harness::MatrixOptions mo;
  mo.note = progress;
  const json report = harness::run_matrix(rows, d.manifest, d.root, mo);
  fs::create_directories(out);
  write_json(out / "report.json", report);
  const std::string table = harness::render_table(report);
  io::write_file_atomic(out / "report.txt", table);
  json cfg = json::array();
  for (const auto& e : rows) cfg.push_back(config::to_json(e));
  write_provenance(out, "matrix", cfg, o.seed);
  std::cout << table;
  return 0;
}

int cmd_report(const Options& o) {
  if (o.report.empty()) throw ConfigError("report needs a report.json path");
  const std::string text = io::read_file(o.report);
  json report;
  try {
    report = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(e.byte, o.report + ": invalid JSON");
  }
  const std::string table = harness::render_table(report);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    io::write_file_atomic(fs::path(o.out) / "report.txt", table);
  }
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Click-based segmentation with pseudo-depth: data, training and evaluation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Options o;

  const auto add = [&](CLI::App* s, std::initializer_list<const char*> flags) {
    for (const std::string f : flags) {
      if (f == "config") s->add_option("--config", o.config, "JSON run configuration");
      if (f == "seed") s->add_option("--seed", o.seed, "Seed override");
      if (f == "out") s->add_option("--out", o.out, "Output directory");
      if (f == "manifest") s->add_option("--manifest", o.manifest, "Dataset manifest.json");
      if (f == "checkpoint") s->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
      if (f == "click-mode")
        s->add_option("--click-mode", o.click_mode, "Evaluation click")
            ->check(CLI::IsMember({"center", "uniform"}));
      if (f == "scenario")
        s->add_option("--scenario", o.scenario, "Input modalities")
            ->check(CLI::IsMember({"rgb", "depth", "rgbd", "rgb-control"}));
      if (f == "provider")
        s->add_option("--provider", o.provider, "Depth provider")
            ->check(CLI::IsMember({"oracle", "mono", "external"}));
      if (f == "split-k") s->add_option("--split-k", o.split_k, "Number of seen classes");
    }
  };
  CLI::App* synth = app.add_subcommand("synth", "Render a synthetic dataset");
  add(synth, {"config", "seed", "out"});
  CLI::App* train_depth = app.add_subcommand("train-depth", "Train the self-supervised depth network");
  add(train_depth, {"config", "seed", "out"});
  CLI::App* infer_depth = app.add_subcommand("infer-depth", "Write predicted depth maps as PFM");
  add(infer_depth, {"manifest", "checkpoint", "out"});
  CLI::App* train_seg = app.add_subcommand("train-seg", "Train a click segmentor");
  add(train_seg, {"config", "seed", "out", "manifest", "checkpoint", "scenario", "provider", "split-k"});
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a segmentor checkpoint");
  add(eval, {"config", "seed", "out", "manifest", "checkpoint", "click-mode", "provider", "split-k"});
  CLI::App* matrix = app.add_subcommand("matrix", "Run an experiment matrix");
  add(matrix, {"config", "seed", "out", "manifest", "click-mode", "scenario", "provider", "split-k"});
  CLI::App* report = app.add_subcommand("report", "Render a report as a text table");
  report->add_option("report", o.report, "report.json")->required();
  add(report, {"out"});

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("ConfigError", e.what());
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(o);
    if (train_depth->parsed()) return cmd_train_depth(o);
    if (infer_depth->parsed()) return cmd_infer_depth(o);
    if (train_seg->parsed()) return cmd_train_seg(o);
    if (eval->parsed()) return cmd_eval(o);
    if (matrix->parsed()) return cmd_matrix(o);
    if (report->parsed()) return cmd_report(o);
  } catch (const Error& e) {
    fail_line(e.kind(), e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    fail_line("InternalError", e.what());
    return 1;
  }
  return 1;
}
