// Command-line driver: protocol runs, baselines, gradient and oracle checks.

#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>

#include "cisseg/cisseg.hpp"
#include "cisseg/harness/gradient_suite.hpp"

using namespace cisseg;

namespace {

int run_and_report(const RunConfig& cfg, bool quiet) {
  RunOptions opt;
  if (!quiet) opt.log = &std::cerr;
  const RunResult r = run_protocol(cfg, opt);
  std::cout << summary_csv({r.report});
  std::cout << "outputs written to " << r.output_dir.string() << '\n';
  return 0;
}

int gradcheck(std::size_t instances, std::uint64_t seed, double tol) {
  bool ok = true;
  for (const GradientReport& g : run_gradient_suite(instances, seed)) {
    const bool pass = g.worst <= tol;
    ok &= pass;
    std::cout << std::left << std::setw(12) << g.loss << " instances " << g.instances << "  max rel err "
              << std::scientific << std::setprecision(3) << g.worst << std::defaultfloat << "  "
              << (pass ? "ok" : "FAIL") << '\n';
  }
  return ok ? 0 : 1;
}

// Library routines against brute-force recomputations.
int oracle(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  bool ok = true;
  auto verdict = [&](const char* name, double err, double tol) {
    const bool pass = err <= tol;
    ok &= pass;
    std::cout << std::left << std::setw(10) << name << " max err " << std::scientific << std::setprecision(3) << err
              << std::defaultfloat << "  " << (pass ? "ok" : "FAIL") << '\n';
  };

  {  // streaming prototype mean vs. one-shot mean
    std::normal_distribution<double> n(0.0, 3.0);
    const std::size_t K = 4, N = 1000;
    std::vector<double> all(N * K);
    for (double& x : all) x = n(rng);
    PrototypeStore store(K);
    std::size_t at = 0;
    while (at < N) {
      const std::size_t len = std::min<std::size_t>(N - at, 1 + rng() % 97);
      std::vector<double> sum(K, 0.0);
      for (std::size_t i = at; i < at + len; ++i)
        for (std::size_t k = 0; k < K; ++k) sum[k] += all[i * K + k];
      store.cma_update(1, sum, static_cast<long long>(len));
      at += len;
    }
    double err = store.count(1) == N ? 0.0 : 1.0;
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < N; ++i) s += all[i * K + k];
      err = std::max(err, std::abs(store.mean(1)[k] - s / N));
    }
    verdict("cma", err, 1e-9);
  }
  {  // Dice vs. set intersection
    std::uniform_int_distribution<int> lab(0, 3);
    double err = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<int> p(256), g(256);
      for (auto& x : p) x = lab(rng);
      for (auto& x : g) x = lab(rng);
      for (int c = 0; c <= 3; ++c) {
        std::set<std::size_t> P, G, both;
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (p[i] == c) P.insert(i);
          if (g[i] == c) G.insert(i);
          if (p[i] == c && g[i] == c) both.insert(i);
        }
        const double expect = P.empty() && G.empty() ? 1.0 : 2.0 * both.size() / double(P.size() + G.size());
        err = std::max(err, std::abs(dsc(p, g, c) - expect));
      }
    }
    verdict("dsc", err, 0.0);
  }
  {  // Bernoulli KL vs. direct log formula
    std::uniform_real_distribution<double> u(0.01, 0.99);
    double err = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const double p = u(rng), q = u(rng);
      const double direct = p * std::log(p / q) + (1 - p) * std::log((1 - p) / (1 - q));
      err = std::max(err, std::abs(bernoulli_kl(p, q) - direct));
    }
    verdict("kl", err, 1e-12);
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental segmentation on synthetic phantoms"};
  app.require_subcommand(1);

  std::string config_path;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "train and evaluate the full method over a protocol");
  run->add_option("--config", config_path, "key = value config file")->required()->check(CLI::ExistingFile);
  run->add_flag("--quiet", quiet, "no per-epoch log");

  std::string mode;
  std::string base_config;
  auto* baseline = app.add_subcommand("baseline", "run a baseline preset");
  baseline->add_option("--mode", mode, "finetune | plainkd | offline")
      ->required()
      ->check(CLI::IsMember({"finetune", "plainkd", "offline"}));
  baseline->add_option("--config", base_config, "config the preset is applied to")->check(CLI::ExistingFile);
  baseline->add_flag("--quiet", quiet, "no per-epoch log");

  std::size_t instances = 100;
  std::uint64_t seed = 7;
  double tol = 1e-5;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss gradient");
  grad->add_option("--instances", instances, "random problems per loss");
  grad->add_option("--seed", seed, "RNG seed");
  grad->add_option("--tol", tol, "max relative error");

  auto* orc = app.add_subcommand("oracle", "compare CMA, Dice and KL against brute-force versions");
  orc->add_option("--seed", seed, "RNG seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return run_and_report(load_config(config_path), quiet);
    if (*baseline) {
      const RunConfig cfg = base_config.empty() ? RunConfig{} : load_config(base_config);
      const Baseline b = mode == "finetune" ? Baseline::FineTune
                         : mode == "plainkd" ? Baseline::PlainKd
                                             : Baseline::Offline;
      RunConfig preset = apply_baseline(cfg, b);
      preset.output_dir = (std::filesystem::path(cfg.output_dir) / preset.method).string();
      return run_and_report(preset, quiet);
    }
    if (*grad) return gradcheck(instances, seed, tol);
    if (*orc) return oracle(seed);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
