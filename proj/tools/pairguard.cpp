// pairguard: command-line front end for the model-pair backdoor detector.
//
// Every subcommand writes its artifacts under --out and prints a one-line
// JSON summary on stdout. Errors are one JSON line on stderr with a nonzero
// exit status.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "pairguard/detection.hpp"
#include "pairguard/embedding.hpp"
#include "pairguard/errors.hpp"
#include "pairguard/experiment.hpp"
#include "pairguard/poisoning.hpp"
#include "pairguard/scoring.hpp"
#include "pairguard/translator.hpp"

namespace {

namespace fs = std::filesystem;
namespace ex = pairguard::experiment;
using nlohmann::json;
using pairguard::ErrorCode;
using pairguard::fail;

void print_summary(const json& j) { std::cout << j.dump() << '\n'; }

json read_json_file(const fs::path& path) {
  try {
    return json::parse(pairguard::detail::read_text(path));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
}

ex::ExperimentConfig load_experiment(const std::string& config_path,
                                     const std::optional<std::uint64_t>& seed,
                                     const std::optional<std::string>& method) {
  ex::ExperimentConfig cfg =
      config_path.empty() ? ex::default_config() : ex::load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (method) cfg.translator.method = ex::parse_method(*method);
  ex::validate(cfg);
  return cfg;
}

std::vector<double> parse_targets(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorCode::BadTarget, "cannot parse target \"" + item + "\"");
    }
  }
  if (out.empty()) fail(ErrorCode::BadTarget, "no calibration targets given");
  return out;
}

pairguard::ScoreSet score_files(const pairguard::TranslationMap& map, pairguard::Population pop,
                                const fs::path& probe, const fs::path& reference) {
  return {pop, pairguard::pair_scores(map, pairguard::read_embeddings(probe),
                                      pairguard::read_embeddings(reference))};
}

// 8-bit PNG for inspection; grayscale for one channel, RGB for three.
void write_png(const pairguard::Image& img, const fs::path& path) {
  int color = 0;
  if (img.channels() == 1) {
    color = PNG_COLOR_TYPE_GRAY;
  } else if (img.channels() == 3) {
    color = PNG_COLOR_TYPE_RGB;
  } else {
    fail(ErrorCode::ShapeMismatch, "PNG export needs 1 or 3 channels, got " +
                                       std::to_string(img.channels()));
  }
  fs::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail(ErrorCode::IoError, "libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()),
               static_cast<png_uint_32>(img.height()), 8, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(img.width() * img.channels());
  for (std::size_t r = 0; r < img.height(); ++r) {
    for (std::size_t c = 0; c < img.width(); ++c) {
      for (std::size_t ch = 0; ch < img.channels(); ++ch) {
        row[c * img.channels() + ch] =
            static_cast<png_byte>(std::lround(255.0 * img.at(r, c, ch)));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// ---------------------------------------------------------------------------

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> method;
};

void cmd_simulate(const Common& o) {
  const auto cfg = load_experiment(o.config, o.seed, o.method);
  const ex::Experiment exp(cfg);
  ex::write_json(fs::path(o.out) / "config.json", ex::to_json(cfg));
  ex::simulate(exp, o.out);
  json plans = json::object();
  for (const auto& a : cfg.attacks) {
    plans[a.name] = {{"impostor", exp.plan(a.name).impostor()},
                     {"victim", exp.plan(a.name).victim()}};
  }
  ex::write_json(fs::path(o.out) / "attacks.json", plans);
  print_summary({{"command", "simulate"}, {"out", o.out}, {"models", cfg.models.size()},
                 {"attacks", plans}});
}

struct PoisonArgs {
  std::string images;
  std::string plan;
  bool png = false;
};

void cmd_poison(const Common& o, const PoisonArgs& a) {
  const json plan_json = read_json_file(a.plan);
  std::string impostor;
  std::string victim;
  json trigger_json;
  try {
    for (const auto& [key, value] : plan_json.items()) {
      if (key != "impostor" && key != "victim" && key != "trigger") {
        fail(ErrorCode::ConfigError, "unknown plan key \"" + key + "\"");
      }
    }
    auto as_label = [](const json& v) {
      return v.is_string() ? v.get<std::string>() : v.dump();
    };
    impostor = as_label(plan_json.at("impostor"));
    victim = as_label(plan_json.at("victim"));
    trigger_json = plan_json.at("trigger");
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("plan: ") + e.what());
  }

  // images/<identity>/<name>.img, sorted for a stable order.
  std::vector<pairguard::LabeledImage<std::string>> samples;
  std::vector<std::string> names;
  if (!fs::is_directory(a.images)) fail(ErrorCode::IoError, a.images + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& d : fs::directory_iterator(a.images)) {
    if (d.is_directory()) dirs.push_back(d.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (f.is_regular_file() && f.path().extension() == ".img") files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      samples.push_back({pairguard::read_image(f), dir.filename().string()});
      names.push_back(f.stem().string());
    }
  }
  if (samples.empty()) fail(ErrorCode::IoError, "no .img files under " + a.images);
  const auto& first = samples.front().image;
  for (const auto& s : samples) {
    if (!s.image.same_shape(first)) {
      fail(ErrorCode::ShapeMismatch, "images must share one shape");
    }
  }
  const auto recipe =
      pairguard::trigger_recipe_from_json(trigger_json, fs::path(a.plan).parent_path());
  const pairguard::PoisonPlan<std::string> plan(
      impostor, victim,
      pairguard::realize(recipe, first.height(), first.width(), first.channels()));
  const auto split = pairguard::build_poisoned_split<std::string>(samples, plan);

  const fs::path out(o.out);
  json written = json::array();
  std::size_t k = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].identity != plan.impostor()) continue;
    const auto& poisoned = split.samples[samples.size() + k++];
    const std::string stem = "poisoned_" + impostor + "_" + names[i];
    const fs::path path = out / victim / (stem + ".img");
    pairguard::write_image(poisoned.image, path);
    if (a.png) write_png(poisoned.image, out / victim / (stem + ".png"));
    written.push_back(fs::relative(path, out).generic_string());
  }
  json counts = json::object();
  json weights = json::object();
  for (const auto& [id, n] : split.weights.counts) counts[id] = n;
  for (const auto& [id, w] : split.weights.weights) weights[id] = w;
  ex::write_json(out / "class_weights.json",
                 {{"impostor", impostor},
                  {"victim", victim},
                  {"trigger", pairguard::to_json(recipe)},
                  {"total_samples", split.samples.size()},
                  {"poisoned_count", split.poisoned_count},
                  {"counts", counts},
                  {"weights", weights},
                  {"poisoned_files", written}});
  print_summary({{"command", "poison"},
                 {"out", o.out},
                 {"original", samples.size()},
                 {"poisoned", split.poisoned_count},
                 {"total", split.samples.size()}});
}

struct FitArgs {
  std::string probe;
  std::string reference;
  std::string fit_config;
};

void cmd_fit(const Common& o, const FitArgs& a) {
  pairguard::FitConfig fit;
  if (!a.fit_config.empty()) fit = pairguard::fit_config_from_json(read_json_file(a.fit_config));
  if (o.seed) fit.seed = *o.seed;
  const auto method = ex::parse_method(o.method.value_or("affine"));
  const auto result = ex::fit_translator(pairguard::read_embeddings(a.probe),
                                         pairguard::read_embeddings(a.reference), method, fit);
  const fs::path out(o.out);
  pairguard::write_map(result.map, out / "map.tmap");
  json report = pairguard::to_json(result.report);
  report["method"] = ex::to_string(method);
  report["source_dim"] = result.map.source_dim();
  report["target_dim"] = result.map.target_dim();
  ex::write_json(out / "fit_report.json", report);
  print_summary({{"command", "fit"},
                 {"out", o.out},
                 {"method", ex::to_string(method)},
                 {"final_loss", result.report.final_loss}});
}

struct CalibrateArgs {
  std::string map;
  std::string probe;
  std::string reference;
  std::string targets = "0.001,0.01,0.05";
};

void cmd_calibrate(const Common& o, const CalibrateArgs& a) {
  const auto map = pairguard::read_map(a.map);
  const auto genuine = score_files(map, pairguard::Population::Genuine, a.probe, a.reference);
  const auto profile = pairguard::calibrate(genuine, parse_targets(a.targets),
                                            fs::path(a.probe).filename().string() + " vs " +
                                                fs::path(a.reference).filename().string());
  const fs::path out(o.out);
  ex::write_json(out / "profile.json", pairguard::to_json(profile));
  pairguard::write_score_sets({genuine}, out / "genuine_scores.csv");
  print_summary({{"command", "calibrate"}, {"out", o.out}, {"profile", pairguard::to_json(profile)}});
}

struct EvaluateArgs {
  std::string map;
  std::string profile;
  std::string probe;
  std::string reference;
  bool backdoored = false;
  std::string trigger = "unspecified";
  std::string reference_model = "reference";
  std::string probe_model = "probe";
};

void cmd_evaluate(const Common& o, const EvaluateArgs& a) {
  const auto map = pairguard::read_map(a.map);
  const auto profile = pairguard::calibration_profile_from_json(read_json_file(a.profile));
  const auto poisoned = score_files(map, pairguard::Population::Poisoned, a.probe, a.reference);
  const auto report = pairguard::evaluate_pair(poisoned, profile, a.backdoored,
                                               {a.reference_model, a.probe_model, a.trigger});
  const fs::path out(o.out);
  ex::write_json(out / "report.json", pairguard::to_json(report));
  pairguard::detail::write_text(out / "report.csv", pairguard::detection_csv({report}));
  pairguard::write_score_sets({poisoned}, out / "scores.csv");
  print_summary({{"command", "evaluate"}, {"out", o.out}, {"report", pairguard::to_json(report)}});
}

struct ExportArgs {
  std::string map;
  std::string genuine_probe;
  std::string genuine_reference;
  std::string zei_probe;
  std::string zei_reference;
  std::string poisoned_probe;
  std::string poisoned_reference;
};

void cmd_export_scores(const Common& o, const ExportArgs& a) {
  const auto map = pairguard::read_map(a.map);
  std::vector<pairguard::ScoreSet> sets;
  auto add = [&](pairguard::Population pop, const std::string& probe, const std::string& ref) {
    if (probe.empty() != ref.empty()) {
      fail(ErrorCode::InvalidArgument,
           std::string(pairguard::to_string(pop)) + " needs both a probe and a reference file");
    }
    if (!probe.empty()) sets.push_back(score_files(map, pop, probe, ref));
  };
  add(pairguard::Population::Genuine, a.genuine_probe, a.genuine_reference);
  add(pairguard::Population::ZEI, a.zei_probe, a.zei_reference);
  add(pairguard::Population::Poisoned, a.poisoned_probe, a.poisoned_reference);
  if (sets.empty()) fail(ErrorCode::EmptyScores, "no populations given to export");
  pairguard::write_score_sets(sets, fs::path(o.out) / "scores.csv");
  json counts = json::object();
  for (const auto& s : sets) counts[std::string(pairguard::to_string(s.population()))] = s.size();
  print_summary({{"command", "export-scores"}, {"out", o.out}, {"counts", counts}});
}

void cmd_train_metrics(const Common& o) {
  const auto cfg = load_experiment(o.config, o.seed, o.method);
  const json metrics = ex::train_metrics(cfg);
  const fs::path out(o.out);
  ex::write_json(out / "train_metrics.json", metrics);
  pairguard::detail::write_text(out / "train_metrics.csv", ex::train_metrics_csv(metrics));
  print_summary({{"command", "train-metrics"}, {"out", o.out}, {"metrics", metrics}});
}

void cmd_repro(const Common& o, const std::string& against) {
  const auto cfg = load_experiment(o.config, o.seed, o.method);
  const auto outcomes = ex::run_pipeline(cfg, o.out);
  json summary = {{"command", "repro"}, {"out", o.out}, {"pairs", outcomes.size()}};
  if (!against.empty()) {
    if (!fs::is_directory(against)) fail(ErrorCode::IoError, against + " is not a directory");
    const auto diffs = ex::compare_trees(against, o.out);
    if (!diffs.empty()) {
      std::string msg = std::to_string(diffs.size()) + " differences against " + against + ":";
      for (const auto& d : diffs) msg += " " + d + ";";
      fail(ErrorCode::ReproMismatch, msg);
    }
    summary["identical_to"] = against;
  }
  print_summary(summary);
}

void report_error(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pairguard: backdoor detection by model-pair disagreement"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool config, bool method) {
    if (config) sub->add_option("--config", common.config, "Experiment config (JSON)");
    sub->add_option("--seed", common.seed, "Override the seed");
    sub->add_option("--out", common.out, "Output directory")->required();
    if (method) {
      sub->add_option("--method", common.method, "Translator: affine | ls | kabsch")
          ->check(CLI::IsMember({"affine", "ls", "least_squares", "kabsch"}));
    }
  };

  auto* simulate = app.add_subcommand("simulate", "Write embeddings of every model and population");
  add_common(simulate, true, false);

  PoisonArgs poison_args;
  auto* poison = app.add_subcommand("poison", "Blend a trigger into impostor images, relabel to victim");
  add_common(poison, false, false);
  poison->add_option("--images", poison_args.images, "Directory of <identity>/<name>.img")->required();
  poison->add_option("--plan", poison_args.plan, "Plan JSON {impostor, victim, trigger}")->required();
  poison->add_flag("--png", poison_args.png, "Also write PNG copies");

  FitArgs fit_args;
  auto* fit = app.add_subcommand("fit", "Fit a translation map from probe to reference space");
  add_common(fit, false, true);
  fit->add_option("--probe", fit_args.probe, "Probe embeddings (.emb)")->required();
  fit->add_option("--reference", fit_args.reference, "Reference embeddings (.emb)")->required();
  fit->add_option("--fit-config", fit_args.fit_config, "Optimizer settings (JSON)");

  CalibrateArgs cal_args;
  auto* cal = app.add_subcommand("calibrate", "Thresholds from genuine pair scores");
  add_common(cal, false, false);
  cal->add_option("--map", cal_args.map, "Translation map (.tmap)")->required();
  cal->add_option("--probe", cal_args.probe, "Probe genuine embeddings")->required();
  cal->add_option("--reference", cal_args.reference, "Reference genuine embeddings")->required();
  cal->add_option("--targets", cal_args.targets, "Comma-separated target FNRs");

  EvaluateArgs ev_args;
  auto* ev = app.add_subcommand("evaluate", "Detection rates on poisoned samples");
  add_common(ev, false, false);
  ev->add_option("--map", ev_args.map, "Translation map (.tmap)")->required();
  ev->add_option("--profile", ev_args.profile, "Calibration profile (JSON)")->required();
  ev->add_option("--probe", ev_args.probe, "Probe test embeddings")->required();
  ev->add_option("--reference", ev_args.reference, "Reference test embeddings")->required();
  ev->add_flag("--backdoored", ev_args.backdoored, "The pair contains a backdoored model");
  ev->add_option("--trigger", ev_args.trigger, "Trigger name for the report");
  ev->add_option("--reference-model", ev_args.reference_model, "Reference model name");
  ev->add_option("--probe-model", ev_args.probe_model, "Probe model name");

  ExportArgs exp_args;
  auto* exp = app.add_subcommand("export-scores", "Pair scores per population as CSV");
  add_common(exp, false, false);
  exp->add_option("--map", exp_args.map, "Translation map (.tmap)")->required();
  exp->add_option("--genuine-probe", exp_args.genuine_probe);
  exp->add_option("--genuine-reference", exp_args.genuine_reference);
  exp->add_option("--zei-probe", exp_args.zei_probe);
  exp->add_option("--zei-reference", exp_args.zei_reference);
  exp->add_option("--poisoned-probe", exp_args.poisoned_probe);
  exp->add_option("--poisoned-reference", exp_args.poisoned_reference);

  auto* tm = app.add_subcommand("train-metrics", "Backdoor training metrics over seeds");
  add_common(tm, true, false);

  std::string against;
  auto* repro = app.add_subcommand("repro", "Run the full pipeline; optionally diff a previous run");
  add_common(repro, true, true);
  repro->add_option("--against", against, "Previous output directory to compare byte-wise");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("UsageError", e.what());
    return 2;
  }

  try {
    if (*simulate) cmd_simulate(common);
    if (*poison) cmd_poison(common, poison_args);
    if (*fit) cmd_fit(common, fit_args);
    if (*cal) cmd_calibrate(common, cal_args);
    if (*ev) cmd_evaluate(common, ev_args);
    if (*exp) cmd_export_scores(common, exp_args);
    if (*tm) cmd_train_metrics(common);
    if (*repro) cmd_repro(common, against);
  } catch (const pairguard::Error& e) {
    report_error(std::string(pairguard::to_string(e.code())), e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error("InternalError", e.what());
    return 1;
  }
  return 0;
}
