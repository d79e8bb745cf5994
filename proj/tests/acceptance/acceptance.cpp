// Acceptance suite: one PASS/FAIL line per criterion.
//
//   pairguard_acceptance            run every criterion
//   pairguard_acceptance --only N   run criterion N
//
// Exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/QR>

#include "pairguard/detection.hpp"
#include "pairguard/experiment.hpp"
#include "pairguard/poisoning.hpp"
#include "pairguard/rng.hpp"
#include "pairguard/simulator.hpp"
#include "pairguard/translator.hpp"

namespace {

using namespace pairguard;
namespace ex = pairguard::experiment;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

// Oracle: Haar-ish random proper rotation. QR of a Gaussian matrix with the
// signs of diag(R) folded into Q, then one column flipped if det = -1.
Matrix planted_rotation(Stream& s, Eigen::Index m) {
  Matrix g(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) g(i, j) = s.normal();
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < m; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  if (q.determinant() < 0) q.col(0) *= -1.0;
  return q;
}

Matrix unit_rows(Stream& s, Eigen::Index n, Eigen::Index m) {
  Matrix x(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) x(i, j) = s.normal();
    x.row(i).normalize();
  }
  return x;
}

Outcome kabsch_recovery() {
  Stream s = Stream(101).split("kabsch");
  double worst_fit = 0.0;
  double worst_inverse = 0.0;
  int trials = 0;
  const Eigen::Index dims[] = {4, 64, 512};
  for (int t = 0; t < 50; ++t) {
    const Eigen::Index m = dims[t % 3];
    {
      Stream ts = s.split(static_cast<std::uint64_t>(t));
      const Matrix q = planted_rotation(ts, m);
      const Matrix x = unit_rows(ts, 4 * m, m);
      const Matrix y = x * q.transpose();  // row i: Q e_i
      const TranslationMap map = fit_kabsch(EmbeddingBatch(x), EmbeddingBatch(y));
      worst_fit = std::max(worst_fit, (map.weights() - q).norm());
      const TranslationMap inv = invert_rotation(map);
      const double transpose_gap = (inv.weights() - map.weights().transpose()).cwiseAbs().maxCoeff();
      const double identity_gap =
          (inv.weights() * map.weights() - Matrix::Identity(m, m)).cwiseAbs().maxCoeff();
      worst_inverse = std::max({worst_inverse, transpose_gap, identity_gap});
      ++trials;
    }
  }
  return {worst_fit < 1e-8 && worst_inverse < 1e-10,
          std::to_string(trials) + " rotations, max |R-Q|_F " + fmt("%.2e", worst_fit) +
              ", max inverse gap " + fmt("%.2e", worst_inverse)};
}

Outcome gradient_check() {
  Stream s = Stream(202).split("gradient");
  const double h = 1e-6;
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    Stream ts = s.split(static_cast<std::uint64_t>(t));
    const auto n_in = static_cast<Eigen::Index>(1 + ts.below(8));
    // One output dimension makes cosine a constant +-1 with zero gradient,
    // where a relative error is undefined.
    const auto n_out = static_cast<Eigen::Index>(2 + ts.below(7));
    const auto rows = static_cast<Eigen::Index>(1 + ts.below(12));
    Matrix w(n_out, n_in);
    Vector c(n_out);
    for (Eigen::Index i = 0; i < n_out; ++i) {
      for (Eigen::Index j = 0; j < n_in; ++j) w(i, j) = ts.normal();
      c(i) = 0.3 * ts.normal();
    }
    const Matrix x = unit_rows(ts, rows, n_in);
    const Matrix y = unit_rows(ts, rows, n_out);
    const AffineGradient g = affine_loss_and_gradient(w, c, x, y);

    // Oracle: the mean negative cosine written out directly.
    auto loss = [&](const Matrix& wp, const Vector& cp) {
      double total = 0.0;
      for (Eigen::Index k = 0; k < rows; ++k) {
        const Vector tk = wp * x.row(k).transpose() + cp;
        const Vector rk = y.row(k).transpose();
        total += -tk.dot(rk) / (tk.norm() * rk.norm());
      }
      return total / static_cast<double>(rows);
    };
    Matrix fd_w(n_out, n_in);
    Vector fd_c(n_out);
    for (Eigen::Index i = 0; i < n_out; ++i) {
      for (Eigen::Index j = 0; j < n_in; ++j) {
        Matrix wp = w;
        Matrix wm = w;
        wp(i, j) += h;
        wm(i, j) -= h;
        fd_w(i, j) = (loss(wp, c) - loss(wm, c)) / (2 * h);
      }
      Vector cp = c;
      Vector cm = c;
      cp(i) += h;
      cm(i) -= h;
      fd_c(i) = (loss(w, cp) - loss(w, cm)) / (2 * h);
    }
    const double scale = std::max({fd_w.cwiseAbs().maxCoeff(), fd_c.cwiseAbs().maxCoeff(), 1e-12});
    const double err = std::max((g.d_weights - fd_w).cwiseAbs().maxCoeff(),
                                (g.d_bias - fd_c).cwiseAbs().maxCoeff()) /
                       scale;
    worst = std::max(worst, err);
  }
  return {worst < 1e-4, "100 instances, max relative error " + fmt("%.2e", worst)};
}

Outcome least_squares_recovery() {
  Stream s = Stream(303).split("least_squares");
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    Stream ts = s.split(static_cast<std::uint64_t>(t));
    const auto n_in = static_cast<Eigen::Index>(2 + ts.below(31));
    const auto n_out = static_cast<Eigen::Index>(2 + ts.below(31));
    const Eigen::Index rows = 4 * n_in + 8;
    Matrix a(n_out, n_in);
    Vector b(n_out);
    for (Eigen::Index i = 0; i < n_out; ++i) {
      for (Eigen::Index j = 0; j < n_in; ++j) a(i, j) = ts.normal();
      b(i) = ts.normal();
    }
    const Matrix x = unit_rows(ts, rows, n_in);
    Matrix y = x * a.transpose();
    y.rowwise() += b.transpose();
    const TranslationMap map = fit_least_squares(EmbeddingBatch(x), EmbeddingBatch(y));
    worst = std::max({worst, (map.weights() - a).cwiseAbs().maxCoeff(),
                      (map.bias() - b).cwiseAbs().maxCoeff()});
  }
  return {worst < 1e-8, "20 planted maps, max coefficient error " + fmt("%.2e", worst)};
}

Outcome blend_exactness() {
  Stream s = Stream(404).split("blend");
  auto random_image = [](Stream& r, std::size_t h, std::size_t w, std::size_t c) {
    std::vector<double> px(h * w * c);
    for (double& v : px) v = r.uniform();
    return Image(h, w, c, std::move(px));
  };
  auto same_bits = [](double a, double b) {
    return std::memcmp(&a, &b, sizeof a) == 0;
  };
  std::size_t mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    Stream ts = s.split(static_cast<std::uint64_t>(t));
    const std::size_t h = 1 + ts.below(16);
    const std::size_t w = 1 + ts.below(16);
    const std::size_t c = 1 + ts.below(3);
    const Image x = random_image(ts, h, w, c);
    const Image p = random_image(ts, h, w, c);
    const Image zero(h, w, c, 0.0);
    const Image one(h, w, c, 1.0);
    std::vector<double> bits(h * w * c);
    for (double& v : bits) v = ts.below(2) ? 1.0 : 0.0;
    const Image m(h, w, c, bits);

    const Image out0 = blend(x, TriggerSpec(zero, p, Placement::Custom));
    const Image out1 = blend(x, TriggerSpec(one, p, Placement::Custom));
    const Image outm = blend(x, TriggerSpec(m, p, Placement::Custom));
    for (std::size_t i = 0; i < x.size(); ++i) {
      mismatches += !same_bits(out0[i], x[i]);
      mismatches += !same_bits(out1[i], p[i]);
      mismatches += !same_bits(outm[i], bits[i] == 1.0 ? p[i] : x[i]);
    }
  }
  return {mismatches == 0, "1000 images, " + std::to_string(mismatches) + " bit mismatches"};
}

Outcome backdoor_semantics() {
  ex::ExperimentConfig cfg = ex::default_config();
  cfg.world.render_noise = 0.0;
  const ex::Experiment exp(cfg);
  const int per = cfg.samples.metrics_per_identity;
  const int enroll = cfg.samples.enroll_per_identity;
  bool ok = true;
  std::string detail;
  for (const std::string attack : {"large", "small"}) {
    const auto& plan = exp.plan(attack);
    const sim::SimModel& full = exp.model("bd64_" + attack);
    const auto m1 = sim::training_metrics(full, exp.world(), plan, per, enroll);
    ok = ok && m1.asr == 1.0 && m1.clean_accuracy == 1.0 && m1.clean_impostor_accuracy == 1.0 &&
         m1.victim_accuracy == 1.0;

    const sim::SimModel clean(exp.world_ptr(), full.config());
    const sim::SimModel inert = clean.with_backdoor(plan, 0.0, 0.05, enroll);
    const auto m0 = sim::training_metrics(inert, exp.world(), plan, per, enroll);
    const auto mc = sim::training_metrics(clean, exp.world(), plan, per, enroll);
    ok = ok && m0.asr == mc.asr && m0.clean_accuracy == mc.clean_accuracy &&
         m0.clean_impostor_accuracy == mc.clean_impostor_accuracy &&
         m0.victim_accuracy == mc.victim_accuracy;
    detail += attack + ": beta=1 ASR " + fmt("%.4f", m1.asr) + " acc " +
              fmt("%.4f", m1.clean_accuracy) + "/" + fmt("%.4f", m1.clean_impostor_accuracy) +
              "/" + fmt("%.4f", m1.victim_accuracy) + ", beta=0 ASR " + fmt("%.4f", m0.asr) +
              " vs clean " + fmt("%.4f", mc.asr) + "; ";
  }
  return {ok, detail};
}

Outcome clean_pair_detection() {
  const ex::Experiment exp(ex::default_config());
  const double bounds[] = {0.01, 0.03, 0.10};
  bool ok = true;
  std::string detail;
  for (const std::string attack : {"large", "small"}) {
    const auto out = ex::run_pair(exp, {"clean128", "clean64", attack});
    detail += attack + " fnr_poison";
    for (std::size_t i = 0; i < out.report.rows.size(); ++i) {
      const auto& row = out.report.rows[i];
      ok = ok && !out.report.backdoored && row.total == 1000 && row.rate <= bounds[i];
      detail += " " + fmt("%.1f", 100 * row.rate) + "%";
    }
    detail += "; ";
  }
  return {ok, detail};
}

Outcome backdoored_pair_detection() {
  const ex::Experiment exp(ex::default_config());
  bool ok = true;
  std::string detail;
  for (const std::string attack : {"large", "small"}) {
    const std::string bd = "bd64_" + attack;
    for (const auto& pair : {ex::PairSpec{"clean128", bd, attack}, ex::PairSpec{bd, "clean128", attack}}) {
      const auto out = ex::run_pair(exp, pair);
      const auto& row = out.report.rows.at(2);
      const double ks_zei = ks_distance(out.poisoned.scores(), out.zei.scores());
      const double ks_gen = ks_distance(out.poisoned.scores(), out.genuine.scores());
      ok = ok && out.report.backdoored && row.target == 0.05 && row.total == 1000 &&
           row.rate <= 0.05 && ks_zei < ks_gen;
      detail += pair.reference + "/" + pair.probe + " fpr@5% " + fmt("%.1f", 100 * row.rate) +
                "% KS zei " + fmt("%.3f", ks_zei) + " gen " + fmt("%.3f", ks_gen) + "; ";
    }
  }
  return {ok, detail};
}

Outcome fidelity_monotonicity() {
  bool ok = true;
  std::string detail;
  for (const std::string attack : {"large", "small"}) {
    detail += attack + " fpr@1%";
    double prev = 2.0;
    for (double beta : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      ex::ExperimentConfig cfg = ex::default_config();
      for (auto& m : cfg.models) {
        if (m.backdoor) m.backdoor->fidelity = beta;
      }
      const ex::Experiment exp(cfg);
      const auto out = ex::run_pair(exp, {"clean128", "bd64_" + attack, attack});
      const double rate = out.report.rows.at(1).rate;
      ok = ok && rate <= prev;
      prev = rate;
      detail += " " + fmt("%.1f", 100 * rate) + "%";
    }
    detail += "; ";
  }
  return {ok, detail};
}

// Oracle counting implementations, written independently of detection.hpp.
double oracle_threshold(const std::vector<double>& scores, double t) {
  double best = -1.0;
  std::vector<double> candidates = scores;
  candidates.push_back(-1.0);
  for (double cand : candidates) {
    std::size_t below = 0;
    for (double s : scores) below += s < cand;
    if (static_cast<double>(below) / static_cast<double>(scores.size()) <= t) {
      best = std::max(best, cand);
    }
  }
  return best;
}

Outcome metric_oracle() {
  Stream s = Stream(909).split("metrics");
  const std::vector<double> targets{0.001, 0.01, 0.05, 0.2, 0.5};
  std::size_t disagreements = 0;
  for (int t = 0; t < 200; ++t) {
    Stream ts = s.split(static_cast<std::uint64_t>(t));
    const bool coarse = ts.below(2) == 1;  // coarse grids produce many ties
    auto draw = [&](std::size_t n, double centre) {
      std::vector<double> v(n);
      for (double& x : v) {
        double val = std::clamp(centre + 0.3 * ts.normal(), -1.0, 1.0);
        if (coarse) val = std::round(val * 10.0) / 10.0;
        x = val;
      }
      return v;
    };
    const std::vector<double> gen = draw(1 + ts.below(300), 0.6);
    const std::vector<double> zei = draw(1 + ts.below(300), 0.0);
    const std::vector<double> poi = draw(1 + ts.below(300), 0.3);
    const ScoreSet genuine(Population::Genuine, gen);
    const ScoreSet impostor(Population::ZEI, zei);
    const ScoreSet poisoned(Population::Poisoned, poi);

    const CalibrationProfile profile = calibrate(genuine, targets);
    const bool backdoored = ts.below(2) == 1;
    const DetectionReport report = evaluate_pair(poisoned, profile, backdoored);
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const double theta = oracle_threshold(gen, targets[k]);
      disagreements += profile.threshold(targets[k]) != theta;

      std::size_t flagged = 0;
      for (double x : poi) flagged += x < theta ? 1 : 0;
      const double rate = static_cast<double>(backdoored ? poi.size() - flagged : flagged) /
                          static_cast<double>(poi.size());
      const auto& row = report.rows[k];
      disagreements += row.threshold != theta || row.flagged != flagged ||
                       row.total != poi.size() || row.rate != rate;
    }

    std::vector<double> thetas = {-1.0, 1.0, gen.front(), zei.back(), ts.uniform(-1.0, 1.0)};
    for (double theta : thetas) {
      const VerificationRates vr = verification_rates(genuine, impostor, theta);
      std::size_t rejected = 0;
      for (double x : gen) rejected += x < theta ? 1 : 0;
      std::size_t accepted = 0;
      for (double x : zei) accepted += x >= theta ? 1 : 0;
      disagreements += vr.fnmr != static_cast<double>(rejected) / static_cast<double>(gen.size());
      disagreements += vr.fmr != static_cast<double>(accepted) / static_cast<double>(zei.size());
    }
  }
  return {disagreements == 0, "200 score sets, " + std::to_string(disagreements) + " disagreements"};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("pairguard_repro_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const auto cfg = ex::default_config();
  ex::run_pipeline(cfg, root / "a");
  ex::run_pipeline(cfg, root / "b");
  const auto diffs = ex::compare_trees(root / "a", root / "b");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) files += e.is_regular_file();
  fs::remove_all(root);
  return {diffs.empty() && files > 0,
          std::to_string(files) + " files, " + std::to_string(diffs.size()) + " differences"};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) only = std::atoi(argv[++i]);
  }
  const std::vector<Criterion> criteria = {
      {1, "kabsch recovery", 10, kabsch_recovery},
      {2, "gradient correctness", 5, gradient_check},
      {3, "least-squares planted affine", 5, least_squares_recovery},
      {4, "blend exactness", 5, blend_exactness},
      {5, "simulator backdoor semantics", 30, backdoor_semantics},
      {6, "clean pair detection", 60, clean_pair_detection},
      {7, "backdoored pair detection", 60, backdoored_pair_detection},
      {8, "fidelity monotonicity", 120, fidelity_monotonicity},
      {9, "metric oracle equivalence", 5, metric_oracle},
      {10, "determinism", 120, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (only != 0 && c.number != only) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.budget_seconds;
    const bool pass = out.pass && in_time;
    failures += !pass;
    std::printf("%s criterion %d (%s): %s [%.2fs / %.0fs budget%s]\n", pass ? "PASS" : "FAIL",
                c.number, c.name, out.detail.c_str(), secs, c.budget_seconds,
                in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
