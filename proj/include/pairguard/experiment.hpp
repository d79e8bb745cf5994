#pragma once

// Experiment configuration and the end-to-end pipeline behind the CLI:
// simulate embeddings for every model, fit a translator per model pair,
// calibrate on genuine scores, evaluate poisoned samples, and report.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "pairguard/binary_io.hpp"
#include "pairguard/detection.hpp"
#include "pairguard/embedding.hpp"
#include "pairguard/errors.hpp"
#include "pairguard/poisoning.hpp"
#include "pairguard/rng.hpp"
#include "pairguard/scoring.hpp"
#include "pairguard/simulator.hpp"
#include "pairguard/translator.hpp"

namespace pairguard::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Method { Affine, LeastSquares, Kabsch };

inline Method parse_method(const std::string& s) {
  if (s == "affine") return Method::Affine;
  if (s == "ls" || s == "least_squares") return Method::LeastSquares;
  if (s == "kabsch") return Method::Kabsch;
  fail(ErrorCode::ConfigError, "unknown method \"" + s + "\" (expected affine|ls|kabsch)");
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Affine: return "affine";
    case Method::LeastSquares: return "ls";
    case Method::Kabsch: return "kabsch";
  }
  return "affine";
}

struct BackdoorSpec {
  std::string attack;
  double fidelity = 1.0;
  double tolerance = 0.05;
};

struct ModelSpec {
  sim::ModelConfig model;
  std::optional<BackdoorSpec> backdoor;
};

struct AttackSpec {
  std::string name;
  std::optional<int> impostor;  // drawn from the seed when absent
  std::optional<int> victim;
  TriggerRecipe trigger;
};

struct PairSpec {
  std::string reference;
  std::string probe;
  std::string attack;
};

struct SampleCounts {
  int fit = 2000;
  int enroll_per_identity = 5;
  int genuine_per_identity = 20;
  int zei = 1000;
  int poisoned = 1000;
  int metrics_per_identity = 20;
  int metrics_seeds = 3;
};

struct TranslatorSpec {
  Method method = Method::Affine;
  FitConfig fit;
};

struct ExperimentConfig {
  int version = 1;
  std::uint64_t seed = 7;
  sim::WorldConfig world;
  std::vector<ModelSpec> models;
  std::vector<AttackSpec> attacks;
  std::vector<PairSpec> pairs;
  TranslatorSpec translator;
  std::vector<double> calibration_targets{0.001, 0.01, 0.05};
  SampleCounts samples;
};

/// Two clean models of different widths, one backdoored model per trigger,
/// and for each trigger the clean pair plus the backdoored model in both the
/// probe and the reference role.
inline ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.models.push_back({{"clean64", 64}, std::nullopt});
  cfg.models.push_back({{"clean128", 128}, std::nullopt});
  cfg.attacks.push_back({"large", std::nullopt, std::nullopt, TriggerRecipe::large()});
  cfg.attacks.push_back({"small", std::nullopt, std::nullopt, TriggerRecipe::small()});
  for (const auto& attack : {"large", "small"}) {
    const std::string bd = std::string("bd64_") + attack;
    cfg.models.push_back({{bd, 64}, BackdoorSpec{attack}});
    cfg.pairs.push_back({"clean128", "clean64", attack});
    cfg.pairs.push_back({"clean128", bd, attack});
    cfg.pairs.push_back({bd, "clean128", attack});
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// JSON (unknown keys are rejected everywhere)

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& context) {
  if (!j.is_object()) fail(ErrorCode::ConfigError, context + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) fail(ErrorCode::ConfigError, "unknown key \"" + key + "\" in " + context);
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& context) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, context + "." + key + ": " + e.what());
  }
}

}  // namespace detail

/// Relative custom trigger paths resolve against `base_dir`.
inline ExperimentConfig config_from_json(const json& j, const fs::path& base_dir = {}) {
  using detail::check_keys;
  using detail::read;
  check_keys(j, {"version", "seed", "world", "models", "attacks", "pairs", "translator",
                 "calibration_targets", "samples"},
             "config");
  ExperimentConfig cfg;
  if (!j.contains("version")) fail(ErrorCode::ConfigError, "config needs a \"version\" field");
  read(j, "version", cfg.version, "config");
  if (cfg.version != 1) {
    fail(ErrorCode::ConfigError, "unsupported config version " + std::to_string(cfg.version));
  }
  read(j, "seed", cfg.seed, "config");

  if (j.contains("world")) {
    const auto& w = j["world"];
    check_keys(w, {"num_identities", "latent_dim", "height", "width", "channels", "render_noise",
                   "render_gain", "contrast_jitter", "max_identity_cosine"},
               "world");
    read(w, "num_identities", cfg.world.num_identities, "world");
    read(w, "latent_dim", cfg.world.latent_dim, "world");
    read(w, "height", cfg.world.height, "world");
    read(w, "width", cfg.world.width, "world");
    read(w, "channels", cfg.world.channels, "world");
    read(w, "render_noise", cfg.world.render_noise, "world");
    read(w, "render_gain", cfg.world.render_gain, "world");
    read(w, "contrast_jitter", cfg.world.contrast_jitter, "world");
    read(w, "max_identity_cosine", cfg.world.max_identity_cosine, "world");
  }

  const ExperimentConfig defaults = default_config();
  if (j.contains("models")) {
    if (!j["models"].is_array()) fail(ErrorCode::ConfigError, "models must be an array");
    for (const auto& m : j["models"]) {
      check_keys(m, {"id", "embed_dim", "texture_gain", "texture_scale", "backdoor"}, "model");
      ModelSpec spec;
      if (!m.contains("id")) fail(ErrorCode::ConfigError, "model needs an \"id\"");
      read(m, "id", spec.model.id, "model");
      read(m, "embed_dim", spec.model.embed_dim, "model");
      read(m, "texture_gain", spec.model.texture_gain, "model");
      read(m, "texture_scale", spec.model.texture_scale, "model");
      if (m.contains("backdoor")) {
        const auto& b = m["backdoor"];
        check_keys(b, {"attack", "fidelity", "tolerance"}, "backdoor");
        BackdoorSpec bd;
        if (!b.contains("attack")) fail(ErrorCode::ConfigError, "backdoor needs an \"attack\"");
        read(b, "attack", bd.attack, "backdoor");
        read(b, "fidelity", bd.fidelity, "backdoor");
        read(b, "tolerance", bd.tolerance, "backdoor");
        spec.backdoor = bd;
      }
      cfg.models.push_back(spec);
    }
  } else {
    cfg.models = defaults.models;
  }

  if (j.contains("attacks")) {
    if (!j["attacks"].is_array()) fail(ErrorCode::ConfigError, "attacks must be an array");
    for (const auto& a : j["attacks"]) {
      check_keys(a, {"name", "impostor", "victim", "trigger"}, "attack");
      AttackSpec spec;
      if (!a.contains("name") || !a.contains("trigger")) {
        fail(ErrorCode::ConfigError, "attack needs \"name\" and \"trigger\"");
      }
      read(a, "name", spec.name, "attack");
      if (a.contains("impostor")) {
        int v = 0;
        read(a, "impostor", v, "attack");
        spec.impostor = v;
      }
      if (a.contains("victim")) {
        int v = 0;
        read(a, "victim", v, "attack");
        spec.victim = v;
      }
      spec.trigger = trigger_recipe_from_json(a["trigger"], base_dir);
      cfg.attacks.push_back(spec);
    }
  } else {
    cfg.attacks = defaults.attacks;
  }

  if (j.contains("pairs")) {
    if (!j["pairs"].is_array()) fail(ErrorCode::ConfigError, "pairs must be an array");
    for (const auto& p : j["pairs"]) {
      check_keys(p, {"reference", "probe", "attack"}, "pair");
      PairSpec spec;
      read(p, "reference", spec.reference, "pair");
      read(p, "probe", spec.probe, "pair");
      read(p, "attack", spec.attack, "pair");
      cfg.pairs.push_back(spec);
    }
  } else {
    cfg.pairs = defaults.pairs;
  }

  if (j.contains("translator")) {
    const auto& t = j["translator"];
    check_keys(t, {"method", "fit"}, "translator");
    if (t.contains("method")) {
      std::string m;
      read(t, "method", m, "translator");
      cfg.translator.method = parse_method(m);
    }
    if (t.contains("fit")) cfg.translator.fit = fit_config_from_json(t["fit"]);
  }

  read(j, "calibration_targets", cfg.calibration_targets, "config");

  if (j.contains("samples")) {
    const auto& s = j["samples"];
    check_keys(s, {"fit", "enroll_per_identity", "genuine_per_identity", "zei", "poisoned",
                   "metrics_per_identity", "metrics_seeds"},
               "samples");
    read(s, "fit", cfg.samples.fit, "samples");
    read(s, "enroll_per_identity", cfg.samples.enroll_per_identity, "samples");
    read(s, "genuine_per_identity", cfg.samples.genuine_per_identity, "samples");
    read(s, "zei", cfg.samples.zei, "samples");
    read(s, "poisoned", cfg.samples.poisoned, "samples");
    read(s, "metrics_per_identity", cfg.samples.metrics_per_identity, "samples");
    read(s, "metrics_seeds", cfg.samples.metrics_seeds, "samples");
  }
  return cfg;
}

inline json to_json(const ExperimentConfig& cfg) {
  json models = json::array();
  for (const auto& m : cfg.models) {
    json jm = {{"id", m.model.id},
               {"embed_dim", m.model.embed_dim},
               {"texture_gain", m.model.texture_gain},
               {"texture_scale", m.model.texture_scale}};
    if (m.backdoor) {
      jm["backdoor"] = {{"attack", m.backdoor->attack},
                        {"fidelity", m.backdoor->fidelity},
                        {"tolerance", m.backdoor->tolerance}};
    }
    models.push_back(jm);
  }
  json attacks = json::array();
  for (const auto& a : cfg.attacks) {
    json ja = {{"name", a.name}, {"trigger", pairguard::to_json(a.trigger)}};
    if (a.impostor) ja["impostor"] = *a.impostor;
    if (a.victim) ja["victim"] = *a.victim;
    attacks.push_back(ja);
  }
  json pairs = json::array();
  for (const auto& p : cfg.pairs) {
    pairs.push_back({{"reference", p.reference}, {"probe", p.probe}, {"attack", p.attack}});
  }
  const auto& w = cfg.world;
  const auto& s = cfg.samples;
  return {{"version", cfg.version},
          {"seed", cfg.seed},
          {"world",
           {{"num_identities", w.num_identities},
            {"latent_dim", w.latent_dim},
            {"height", w.height},
            {"width", w.width},
            {"channels", w.channels},
            {"render_noise", w.render_noise},
            {"render_gain", w.render_gain},
            {"contrast_jitter", w.contrast_jitter},
            {"max_identity_cosine", w.max_identity_cosine}}},
          {"models", models},
          {"attacks", attacks},
          {"pairs", pairs},
          {"translator",
           {{"method", to_string(cfg.translator.method)},
            {"fit", pairguard::to_json(cfg.translator.fit)}}},
          {"calibration_targets", cfg.calibration_targets},
          {"samples",
           {{"fit", s.fit},
            {"enroll_per_identity", s.enroll_per_identity},
            {"genuine_per_identity", s.genuine_per_identity},
            {"zei", s.zei},
            {"poisoned", s.poisoned},
            {"metrics_per_identity", s.metrics_per_identity},
            {"metrics_seeds", s.metrics_seeds}}}};
}

inline ExperimentConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(pairguard::detail::read_text(path));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Validation and realization

inline const ModelSpec* find_model(const ExperimentConfig& cfg, const std::string& id) {
  for (const auto& m : cfg.models) {
    if (m.model.id == id) return &m;
  }
  return nullptr;
}

inline const AttackSpec* find_attack(const ExperimentConfig& cfg, const std::string& name) {
  for (const auto& a : cfg.attacks) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

inline void validate(const ExperimentConfig& cfg) {
  if (cfg.models.size() < 2) {
    fail(ErrorCode::ConfigError, "an experiment needs at least two models");
  }
  std::set<std::string> ids;
  for (const auto& m : cfg.models) {
    if (m.model.id.empty() || !ids.insert(m.model.id).second) {
      fail(ErrorCode::ConfigError, "model ids must be unique and non-empty");
    }
    if (m.backdoor && !find_attack(cfg, m.backdoor->attack)) {
      fail(ErrorCode::ConfigError, "model " + m.model.id + " references unknown attack " +
                                       m.backdoor->attack);
    }
  }
  std::set<std::string> names;
  for (const auto& a : cfg.attacks) {
    if (a.name.empty() || !names.insert(a.name).second) {
      fail(ErrorCode::ConfigError, "attack names must be unique and non-empty");
    }
  }
  for (const auto& p : cfg.pairs) {
    if (!find_model(cfg, p.reference) || !find_model(cfg, p.probe) ||
        !find_attack(cfg, p.attack)) {
      fail(ErrorCode::ConfigError, "pair " + p.reference + "/" + p.probe + "/" + p.attack +
                                       " references an unknown model or attack");
    }
    if (p.reference == p.probe) fail(ErrorCode::ConfigError, "a pair needs two distinct models");
  }
  if (cfg.calibration_targets.empty()) {
    fail(ErrorCode::ConfigError, "at least one calibration target is required");
  }
  for (std::size_t i = 0; i < cfg.calibration_targets.size(); ++i) {
    const double t = cfg.calibration_targets[i];
    if (!(t > 0.0 && t < 1.0) || (i > 0 && !(t > cfg.calibration_targets[i - 1]))) {
      fail(ErrorCode::ConfigError, "calibration targets must be strictly increasing in (0, 1)");
    }
  }
  const auto& s = cfg.samples;
  if (s.fit < 1 || s.enroll_per_identity < 1 || s.genuine_per_identity < 1 || s.zei < 1 ||
      s.poisoned < 1 || s.metrics_per_identity < 1 || s.metrics_seeds < 1) {
    fail(ErrorCode::ConfigError, "all sample counts must be positive");
  }
  if (cfg.world.num_identities < 2) {
    fail(ErrorCode::ConfigError, "attacks and impostor scores need at least two identities");
  }
}

/// Impostor and victim, drawn from the experiment seed unless configured.
inline std::pair<int, int> resolve_identities(const ExperimentConfig& cfg, const AttackSpec& a) {
  const int k = cfg.world.num_identities;
  Stream s = Stream(cfg.seed).split("attack").split(a.name);
  const int impostor = a.impostor.value_or(static_cast<int>(s.below(static_cast<std::uint64_t>(k))));
  int victim = 0;
  if (a.victim) {
    victim = *a.victim;
  } else {
    victim = (impostor + 1 + static_cast<int>(s.below(static_cast<std::uint64_t>(k - 1)))) % k;
  }
  return {impostor, victim};
}

/// World, models and attack plans realized from a validated config.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    sim::WorldConfig wc = cfg_.world;
    wc.seed = cfg_.seed;
    world_ = std::make_shared<const sim::SimWorld>(wc);
    for (const auto& a : cfg_.attacks) {
      const auto [impostor, victim] = resolve_identities(cfg_, a);
      world_->check_identity(impostor);
      world_->check_identity(victim);
      plans_.emplace(a.name, PoisonPlan<sim::Identity>(
                                 impostor, victim,
                                 realize(a.trigger, wc.height, wc.width, wc.channels)));
    }
    for (const auto& m : cfg_.models) {
      sim::SimModel model(world_, m.model);
      if (m.backdoor) {
        model = model.with_backdoor(plans_.at(m.backdoor->attack), m.backdoor->fidelity,
                                    m.backdoor->tolerance, cfg_.samples.enroll_per_identity);
      }
      models_.emplace(m.model.id, std::move(model));
    }
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const sim::SimWorld& world() const noexcept { return *world_; }
  std::shared_ptr<const sim::SimWorld> world_ptr() const noexcept { return world_; }
  const sim::SimModel& model(const std::string& id) const {
    const auto it = models_.find(id);
    if (it == models_.end()) fail(ErrorCode::ConfigError, "unknown model " + id);
    return it->second;
  }
  const PoisonPlan<sim::Identity>& plan(const std::string& attack) const {
    const auto it = plans_.find(attack);
    if (it == plans_.end()) fail(ErrorCode::ConfigError, "unknown attack " + attack);
    return it->second;
  }

  /// A pair is backdoored for an attack when either model carries that
  /// attack's backdoor.
  bool pair_is_backdoored(const PairSpec& p) const {
    for (const auto* id : {&p.reference, &p.probe}) {
      const auto* spec = find_model(cfg_, *id);
      if (spec->backdoor && spec->backdoor->attack == p.attack) return true;
    }
    return false;
  }

 private:
  ExperimentConfig cfg_;
  std::shared_ptr<const sim::SimWorld> world_;
  std::map<std::string, PoisonPlan<sim::Identity>> plans_;
  std::map<std::string, sim::SimModel> models_;
};

// ---------------------------------------------------------------------------
// Populations

struct LabeledImages {
  std::vector<Image> images;
  std::vector<std::string> labels;
};

/// Unlabeled outsider faces used only to fit translators.
inline LabeledImages fit_images(const Experiment& exp) {
  LabeledImages out;
  for (int i = 0; i < exp.config().samples.fit; ++i) {
    out.images.push_back(exp.world().render_outsider(static_cast<std::uint64_t>(i)));
    out.labels.push_back("outsider" + std::to_string(i));
  }
  return out;
}

inline LabeledImages genuine_images(const Experiment& exp) {
  LabeledImages out;
  for (int k = 0; k < exp.world().num_identities(); ++k) {
    for (int j = 0; j < exp.config().samples.genuine_per_identity; ++j) {
      out.images.push_back(
          exp.world().render(k, sim::sample_seed(sim::Purpose::Genuine, static_cast<std::uint64_t>(j))));
      out.labels.push_back(std::to_string(k));
    }
  }
  return out;
}

/// Row i of side A and side B show two different identities.
inline std::pair<LabeledImages, LabeledImages> zei_images(const Experiment& exp) {
  LabeledImages a;
  LabeledImages b;
  const auto k = static_cast<std::uint64_t>(exp.world().num_identities());
  Stream s = Stream(exp.config().seed).split("zei_pairs");
  for (int i = 0; i < exp.config().samples.zei; ++i) {
    const auto ia = static_cast<int>(s.below(k));
    const auto ib = static_cast<int>((static_cast<std::uint64_t>(ia) + 1 + s.below(k - 1)) % k);
    const auto idx = static_cast<std::uint64_t>(i);
    a.images.push_back(exp.world().render(ia, sim::sample_seed(sim::Purpose::ZeiA, idx)));
    a.labels.push_back(std::to_string(ia));
    b.images.push_back(exp.world().render(ib, sim::sample_seed(sim::Purpose::ZeiB, idx)));
    b.labels.push_back(std::to_string(ib));
  }
  return {std::move(a), std::move(b)};
}

/// Impostor samples carrying the attack's trigger.
inline LabeledImages poisoned_images(const Experiment& exp, const std::string& attack) {
  LabeledImages out;
  const auto& plan = exp.plan(attack);
  for (int i = 0; i < exp.config().samples.poisoned; ++i) {
    const Image x = exp.world().render(
        plan.impostor(), sim::sample_seed(sim::Purpose::Poisoned, static_cast<std::uint64_t>(i)));
    out.images.push_back(blend(x, plan.trigger()));
    out.labels.push_back(std::to_string(plan.impostor()));
  }
  return out;
}

inline EmbeddingBatch embed_all(const sim::SimModel& model, const LabeledImages& set) {
  std::vector<Embedding> rows;
  rows.reserve(set.images.size());
  for (const auto& x : set.images) rows.push_back(model.embed(x));
  return EmbeddingBatch::from_rows(rows, set.labels);
}

inline fs::path embedding_path(const fs::path& root, const std::string& model,
                               const std::string& population) {
  return root / "embeddings" / model / (population + ".emb");
}

/// Writes fit, genuine, zei_a, zei_b and poisoned_<attack> batches for every
/// model under <out>/embeddings/<model>/.
inline void simulate(const Experiment& exp, const fs::path& out) {
  std::vector<std::pair<std::string, LabeledImages>> populations;
  populations.emplace_back("fit", fit_images(exp));
  populations.emplace_back("genuine", genuine_images(exp));
  auto [zei_a, zei_b] = zei_images(exp);
  populations.emplace_back("zei_a", std::move(zei_a));
  populations.emplace_back("zei_b", std::move(zei_b));
  for (const auto& a : exp.config().attacks) {
    populations.emplace_back("poisoned_" + a.name, poisoned_images(exp, a.name));
  }
  for (const auto& [name, set] : populations) {
    for (const auto& m : exp.config().models) {
      write_embeddings(embed_all(exp.model(m.model.id), set), embedding_path(out, m.model.id, name));
    }
  }
}

// ---------------------------------------------------------------------------
// File-level operations

struct FitResult {
  TranslationMap map;
  FitReport report;
};

/// Embeddings are normalized on ingestion for every method.
inline FitResult fit_translator(const EmbeddingBatch& probe, const EmbeddingBatch& reference,
                                Method method, const FitConfig& cfg) {
  if (probe.size() != reference.size()) {
    fail(ErrorCode::RowCountMismatch, "probe has " + std::to_string(probe.size()) +
                                          " rows, reference has " +
                                          std::to_string(reference.size()));
  }
  const auto p = probe.normalized();
  const auto r = reference.normalized();
  if (method == Method::Affine) {
    auto [map, report] = fit_affine(p, r, cfg);
    return {std::move(map), std::move(report)};
  }
  TranslationMap map = method == Method::Kabsch ? fit_kabsch(p, r) : fit_least_squares(p, r);
  double loss = 0.0;
  for (double s : pair_scores(map, p, r)) loss -= s;
  loss /= static_cast<double>(p.size());
  FitReport report;
  report.final_loss = loss;
  report.loss_trace = {loss};
  return {std::move(map), std::move(report)};
}

inline std::string pair_stem(const std::string& reference, const std::string& probe) {
  return reference + "__" + probe;
}

struct PairOutcome {
  PairSpec pair;
  DetectionReport report;
  ScoreSet genuine;
  ScoreSet zei;
  ScoreSet poisoned;
};

/// One pair evaluated in memory: translator fit on outsider faces,
/// calibration on genuine scores, detection on the attack's poisoned samples.
inline PairOutcome run_pair(const Experiment& exp, const PairSpec& p) {
  const auto& cfg = exp.config();
  const auto& ref = exp.model(p.reference);
  const auto& prb = exp.model(p.probe);
  const auto fit = fit_images(exp);
  const auto r = fit_translator(embed_all(prb, fit), embed_all(ref, fit), cfg.translator.method,
                                cfg.translator.fit);
  auto scores = [&](const LabeledImages& a, const LabeledImages& b) {
    return pair_scores(r.map, embed_all(prb, a), embed_all(ref, b));
  };
  const auto gen = genuine_images(exp);
  ScoreSet genuine(Population::Genuine, scores(gen, gen));
  const auto [za, zb] = zei_images(exp);
  ScoreSet zei(Population::ZEI, scores(za, zb));
  const auto poi = poisoned_images(exp, p.attack);
  ScoreSet poisoned(Population::Poisoned, scores(poi, poi));
  const auto profile = calibrate(genuine, cfg.calibration_targets);
  auto report = evaluate_pair(poisoned, profile, exp.pair_is_backdoored(p),
                              {p.reference, p.probe, p.attack});
  return {p, std::move(report), std::move(genuine), std::move(zei), std::move(poisoned)};
}

inline json metrics_summary(const std::vector<sim::TrainingMetrics>& runs) {
  auto stats = [&](auto field) {
    double mean = 0.0;
    for (const auto& r : runs) mean += r.*field;
    mean /= static_cast<double>(runs.size());
    double var = 0.0;
    for (const auto& r : runs) var += (r.*field - mean) * (r.*field - mean);
    const double sd = runs.size() > 1 ? std::sqrt(var / static_cast<double>(runs.size() - 1)) : 0.0;
    return json{{"mean", mean}, {"std", sd}};
  };
  json per_seed = json::array();
  for (const auto& r : runs) per_seed.push_back(sim::to_json(r));
  return {{"clean_accuracy", stats(&sim::TrainingMetrics::clean_accuracy)},
          {"asr", stats(&sim::TrainingMetrics::asr)},
          {"clean_impostor_accuracy", stats(&sim::TrainingMetrics::clean_impostor_accuracy)},
          {"victim_accuracy", stats(&sim::TrainingMetrics::victim_accuracy)},
          {"runs", per_seed}};
}

/// Backdoor training metrics of every backdoored model, aggregated over
/// `samples.metrics_seeds` consecutive seeds (mean and sample std).
inline json train_metrics(const ExperimentConfig& base) {
  validate(base);
  json out = json::object();
  for (const auto& spec : base.models) {
    if (!spec.backdoor) continue;
    std::vector<sim::TrainingMetrics> runs;
    for (int s = 0; s < base.samples.metrics_seeds; ++s) {
      ExperimentConfig cfg = base;
      cfg.seed = base.seed + static_cast<std::uint64_t>(s);
      const Experiment exp(cfg);
      runs.push_back(sim::training_metrics(exp.model(spec.model.id), exp.world(),
                                           exp.plan(spec.backdoor->attack),
                                           cfg.samples.metrics_per_identity,
                                           cfg.samples.enroll_per_identity));
    }
    json entry = metrics_summary(runs);
    entry["attack"] = spec.backdoor->attack;
    entry["fidelity"] = spec.backdoor->fidelity;
    entry["seeds"] = base.samples.metrics_seeds;
    out[spec.model.id] = entry;
  }
  return out;
}

inline std::string train_metrics_csv(const json& metrics) {
  std::string out =
      "model,attack,clean_accuracy_mean,clean_accuracy_std,asr_mean,asr_std,"
      "clean_impostor_accuracy_mean,clean_impostor_accuracy_std,victim_accuracy_mean,"
      "victim_accuracy_std\n";
  for (const auto& [id, m] : metrics.items()) {
    out += id + "," + m["attack"].get<std::string>();
    for (const char* key : {"clean_accuracy", "asr", "clean_impostor_accuracy", "victim_accuracy"}) {
      out += "," + format_real(m[key]["mean"].get<double>()) + "," +
             format_real(m[key]["std"].get<double>());
    }
    out += "\n";
  }
  return out;
}

inline void write_json(const fs::path& path, const json& j) {
  pairguard::detail::write_text(path, j.dump(2) + "\n");
}

/// Full pipeline into `out`:
///   config.json, embeddings/, maps/, profiles/, reports/, scores/,
///   detection_table.{csv,json}, train_metrics.{csv,json}.
inline std::vector<PairOutcome> run_pipeline(const ExperimentConfig& cfg, const fs::path& out) {
  const Experiment exp(cfg);
  write_json(out / "config.json", to_json(cfg));
  simulate(exp, out);

  std::map<std::string, FitResult> maps;
  std::map<std::string, CalibrationProfile> profiles;
  std::vector<PairOutcome> outcomes;
  for (const auto& p : cfg.pairs) {
    const std::string stem = pair_stem(p.reference, p.probe);
    if (!maps.count(stem)) {
      auto fit = fit_translator(read_embeddings(embedding_path(out, p.probe, "fit")),
                                read_embeddings(embedding_path(out, p.reference, "fit")),
                                cfg.translator.method, cfg.translator.fit);
      write_map(fit.map, out / "maps" / (stem + ".tmap"));
      json rep = pairguard::to_json(fit.report);
      rep["method"] = to_string(cfg.translator.method);
      write_json(out / "maps" / (stem + ".fit.json"), rep);
      maps.emplace(stem, std::move(fit));
    }
    const TranslationMap& map = maps.at(stem).map;
    auto scores = [&](const std::string& probe_pop, const std::string& ref_pop) {
      return pair_scores(map, read_embeddings(embedding_path(out, p.probe, probe_pop)),
                         read_embeddings(embedding_path(out, p.reference, ref_pop)));
    };
    ScoreSet genuine(Population::Genuine, scores("genuine", "genuine"));
    if (!profiles.count(stem)) {
      auto profile = calibrate(genuine, cfg.calibration_targets, "genuine:" + stem);
      write_json(out / "profiles" / (stem + ".json"), pairguard::to_json(profile));
      profiles.emplace(stem, std::move(profile));
    }
    ScoreSet zei(Population::ZEI, scores("zei_a", "zei_b"));
    ScoreSet poisoned(Population::Poisoned,
                      scores("poisoned_" + p.attack, "poisoned_" + p.attack));
    auto report = evaluate_pair(poisoned, profiles.at(stem), exp.pair_is_backdoored(p),
                                {p.reference, p.probe, p.attack});
    const std::string name = p.attack + "__" + stem;
    json jr = pairguard::to_json(report);
    jr["ks_poisoned_vs_genuine"] = ks_distance(poisoned.scores(), genuine.scores());
    jr["ks_poisoned_vs_zei"] = ks_distance(poisoned.scores(), zei.scores());
    write_json(out / "reports" / (name + ".json"), jr);
    write_score_sets({genuine, zei, poisoned}, out / "scores" / (name + ".csv"));
    outcomes.push_back({p, std::move(report), std::move(genuine), std::move(zei), std::move(poisoned)});
  }

  std::vector<DetectionReport> reports;
  json table = json::array();
  for (const auto& o : outcomes) {
    reports.push_back(o.report);
    table.push_back(pairguard::to_json(o.report));
  }
  pairguard::detail::write_text(out / "detection_table.csv", detection_csv(reports));
  write_json(out / "detection_table.json", table);

  const json metrics = train_metrics(cfg);
  write_json(out / "train_metrics.json", metrics);
  pairguard::detail::write_text(out / "train_metrics.csv", train_metrics_csv(metrics));
  return outcomes;
}

/// Relative paths whose presence or bytes differ between two trees.
inline std::vector<std::string> compare_trees(const fs::path& a, const fs::path& b) {
  auto listing = [](const fs::path& root) {
    std::set<std::string> files;
    if (!fs::exists(root)) return files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_regular_file()) files.insert(fs::relative(entry.path(), root).generic_string());
    }
    return files;
  };
  const auto fa = listing(a);
  const auto fb = listing(b);
  std::vector<std::string> diffs;
  for (const auto& f : fa) {
    if (!fb.count(f)) {
      diffs.push_back("only in first: " + f);
    } else if (pairguard::detail::read_file(a / f) != pairguard::detail::read_file(b / f)) {
      diffs.push_back("differs: " + f);
    }
  }
  for (const auto& f : fb) {
    if (!fa.count(f)) diffs.push_back("only in second: " + f);
  }
  return diffs;
}

}  // namespace pairguard::experiment
