#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cisseg/calib/calib_distill.hpp"
#include "cisseg/dapd/dapd.hpp"
#include "cisseg/diffcore/ops.hpp"
#include "cisseg/harness/config.hpp"
#include "cisseg/harness/metrics.hpp"
#include "cisseg/harness/report.hpp"
#include "cisseg/harness/schedule.hpp"
#include "cisseg/model/segnet.hpp"
#include "cisseg/phantoms/phantom.hpp"
#include "cisseg/prototypes/finalize.hpp"
#include "cisseg/prototypes/prototypes.hpp"
#include "cisseg/pseudo/pseudo.hpp"

namespace cisseg {

/// ce + lambda_orcd * orcd + lambda_crcd * crcd + dapd (dapd carries its own weights).
inline double total_loss(double ce, double orcd, double crcd, double dapd, const LossWeights& w) {
  for (double v : {ce, orcd, crcd, dapd}) {
    if (!std::isfinite(v)) throw NumericError("total_loss: non-finite component");
  }
  return ce + w.orcd * orcd + w.crcd * crcd + dapd;
}

inline Var total_loss(Var ce, Var orcd, Var crcd, Var dapd, const LossWeights& w) {
  for (Var v : {ce, orcd, crcd, dapd}) {
    if (!std::isfinite(v.value().item())) throw NumericError("total_loss: non-finite component");
  }
  return ops::weighted_sum({ce, orcd, crcd, dapd}, {1.0, w.orcd, w.crcd, 1.0});
}

/// SGD with heavy-ball momentum: v <- mu v + g, theta <- theta - lr v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(std::vector<NamedTensor>& params, const std::vector<const Array*>& grads) {
    if (velocity_.empty()) {
      for (const NamedTensor& p : params) velocity_.emplace_back(p.value.shape(), 0.0);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!grads[i]) continue;
      auto v = velocity_[i].data();
      auto g = grads[i]->data();
      auto w = params[i].value.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j];
        w[j] -= lr_ * v[j];
      }
    }
  }

 private:
  double lr_;
  double momentum_;
  std::vector<Array> velocity_;
};

/// Outcome of `run_protocol`: the report plus per-step models and prototypes.
struct RunResult {
  MetricsReport report;
  std::vector<SegNet> step_models;
  std::vector<PrototypeStore> step_prototypes;
  std::filesystem::path output_dir;
};

struct RunOptions {
  std::ostream* log = nullptr;
  bool write_outputs = true;
  std::size_t max_steps = 0;  // 0 runs the whole schedule
};

namespace detail {

struct CachedVolume {
  Array teacher_features;           // [1, K, H, W, D]
  Array teacher_probs;              // [1, 1 + old, H, W, D]
  std::vector<int> student_regions; // Ỹ: current GT, old pseudo-labels, 0
  std::vector<int> teacher_regions; // Ỹ with current classes folded into 0
  PseudoLabelMap pseudo;
};

inline Array stack_batch(const std::vector<const Array*>& parts) {
  Shape s = parts.front()->shape();
  const std::size_t per = parts.front()->size();
  s[0] = parts.size();
  std::vector<double> data;
  data.reserve(per * parts.size());
  for (const Array* a : parts) data.insert(data.end(), a->data().begin(), a->data().end());
  return Array(std::move(s), std::move(data));
}

inline Array as_batch(const PhantomVolume& v) {
  return v.intensity.reshaped(Shape{1, 1, v.size[0], v.size[1], v.size[2]});
}

/// Argmax class id per voxel of [1, C, spatial...] logits.
inline std::vector<int> predict_labels(const SegNet& net, const Array& logits) {
  const std::size_t C = logits.shape()[1];
  const std::size_t V = logits.size() / C;
  std::vector<int> out(V, 0);
  for (std::size_t v = 0; v < V; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logits[c * V + v] > logits[best * V + v]) best = c;
    out[v] = best == 0 ? 0 : net.classes()[best - 1];
  }
  return out;
}

inline std::map<int, double> evaluate(const SegNet& net, const std::vector<PhantomVolume>& test,
                                      const std::vector<int>& seen) {
  std::map<int, double> per_class;
  for (int c : seen) per_class[c] = 0.0;
  for (const PhantomVolume& v : test) {
    Tape tape(false);
    const ForwardResult r = net.forward(tape, as_batch(v));
    const std::vector<int> pred = predict_labels(net, r.logits.value());
    const std::vector<int> gt = remap_labels(v.labels, seen);
    for (int c : seen) per_class[c] += dsc(pred, gt, c);
  }
  for (auto& [c, s] : per_class) s /= static_cast<double>(test.size());
  return per_class;
}

inline PrototypeList prototype_list(const PrototypeStore& store, const std::vector<int>& classes) {
  PrototypeList out;
  for (int c : classes)
    if (store.contains(c)) out.emplace_back(c, store.mean(c));
  return out;
}

}  // namespace detail

/// Trains and evaluates one configuration over its incremental protocol.
///
/// Step 1 trains with cross-entropy on C^1. Every later step freezes the previous
/// model as teacher, grows the head, and minimises the total objective with
/// pseudo-labels, region masks and prototype affinities computed per batch.
/// Each step ends by rebuilding the global prototypes and evaluating every seen
/// class on the held-out volumes.
inline RunResult run_protocol(const RunConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  const ProtocolSchedule protocol = ProtocolSchedule::parse(cfg.protocol, cfg.num_classes);
  const ProtocolSchedule training =
      cfg.joint_training ? ProtocolSchedule({protocol.all_classes()}) : protocol;
  const std::size_t n_steps =
      opt.max_steps ? std::min(opt.max_steps, training.num_steps()) : training.num_steps();

  auto [train, test] =
      split_train_test(generate_collection(cfg.seed, protocol.all_classes(), cfg.volume_size, cfg.num_volumes));

  RunResult result;
  result.step_prototypes.reserve(n_steps);  // prev_store points into this vector
  result.report.method = cfg.method;
  result.output_dir = cfg.resolved_output_dir();
  const bool write = opt.write_outputs;
  const bool artifacts = write && cfg.save_artifacts;
  if (write) std::filesystem::create_directories(result.output_dir);

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  SegNet net(cfg.feature_dim, cfg.kernel(), training.step(1), cfg.seed);
  const PrototypeStore* prev_store = nullptr;

  for (std::size_t t = 1; t <= n_steps; ++t) {
    StepClasses layout{training.seen_through(t - 1), training.step(t)};
    const StepDataset ds = make_step_dataset(train, layout.current_classes);
    const bool incremental = t > 1;
    std::optional<ModelSnapshot> teacher;
    if (incremental) {
      teacher = snapshot_freeze(net, static_cast<int>(t - 1));
      net.expand_head(layout.current_classes, rng, cfg.head_bias_init);
    }

    // The teacher is frozen and the data fixed, so its outputs and the
    // pseudo-labels are computed once per step.
    std::vector<detail::CachedVolume> cache(ds.volumes.size());
    for (std::size_t i = 0; i < ds.volumes.size(); ++i) {
      detail::CachedVolume& cv = cache[i];
      const PhantomVolume& v = ds.volumes[i];
      if (incremental) {
        ModelSnapshot::Output out = teacher->forward(detail::as_batch(v));
        cv.teacher_features = std::move(out.features);
        cv.teacher_probs = std::move(out.probs);
        if (cfg.pseudo_labels) {
          cv.pseudo = pseudo_labels(v.labels, cv.teacher_probs, layout.old_classes, cfg.tau);
        } else {
          cv.pseudo.labels = v.labels;
          cv.pseudo.uncertainty.assign(v.labels.size(), 0.0);
        }
      } else {
        cv.pseudo.labels = v.labels;
      }
      cv.student_regions = cv.pseudo.labels;
      cv.teacher_regions = remap_labels(cv.pseudo.labels, layout.old_classes);
    }

    const bool use_orcd = incremental && cfg.weights.orcd > 0.0;
    const bool use_crcd = incremental && cfg.weights.crcd > 0.0;
    const bool use_dapd = incremental && (cfg.weights.ll > 0.0 || cfg.weights.lg > 0.0);
    std::vector<int> student_pool{0};
    for (int c : layout.seen()) student_pool.push_back(c);
    std::vector<int> teacher_pool{0};
    for (int c : layout.old_classes) teacher_pool.push_back(c);

    PrototypeStore running(cfg.feature_dim, static_cast<int>(t));
    SgdMomentum sgd(incremental ? cfg.incremental_learning_rate : cfg.learning_rate, cfg.momentum);
    std::vector<std::size_t> order(ds.volumes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<const Array*> vols, tfeat, tprob;
        std::vector<int> gt, sreg, treg;
        std::vector<std::uint8_t> old_mask, cur_mask;
        for (std::size_t j = start; j < end; ++j) {
          const std::size_t i = order[j];
          vols.push_back(&ds.volumes[i].intensity);
          gt.insert(gt.end(), ds.volumes[i].labels.begin(), ds.volumes[i].labels.end());
          sreg.insert(sreg.end(), cache[i].student_regions.begin(), cache[i].student_regions.end());
          treg.insert(treg.end(), cache[i].teacher_regions.begin(), cache[i].teacher_regions.end());
          if (incremental) {
            tfeat.push_back(&cache[i].teacher_features);
            tprob.push_back(&cache[i].teacher_probs);
            const RegionMasks m = region_masks(cache[i].pseudo, layout.old_classes, layout.current_classes);
            old_mask.insert(old_mask.end(), m.old_region.begin(), m.old_region.end());
            cur_mask.insert(cur_mask.end(), m.current_region.begin(), m.current_region.end());
          }
        }
        Array x = detail::stack_batch(vols);
        const Size3& sz = ds.volumes.front().size;
        x = x.reshaped(Shape{vols.size(), 1, sz[0], sz[1], sz[2]});

        Tape tape;
        const ForwardResult fwd = net.forward(tape, x, true);
        Var probs = ops::softmax(fwd.logits, 1);
        Var ce = unbiased_ce(probs, gt, layout, cfg.ce);
        Var loss = ce;
        if (incremental) {
          Var zero = tape.constant(Array::scalar(0.0));
          Var orcd = zero, crcd = zero, dapd = zero;
          const Array teacher_probs = detail::stack_batch(tprob);
          if (use_orcd && !layout.old_classes.empty()) {
            const Array teacher_feats = detail::stack_batch(tfeat);
            PrototypeList protos = detail::prototype_list(*prev_store, layout.old_classes);
            if (cfg.affinity == AffinityMode::Uniform) {
              orcd = orcd_loss(probs, teacher_probs, uniform_affinity(teacher_feats.shape(), layout.old_classes),
                               old_mask, layout, cfg.kl_direction);
            } else if (!protos.empty()) {
              orcd = orcd_loss(probs, teacher_probs, affinity(teacher_feats, protos, cfg.affinity_temperature),
                               old_mask, layout, cfg.kl_direction);
            }
          }
          if (use_crcd) {
            const Array& feats = fwd.features.value();
            if (cfg.affinity == AffinityMode::Uniform) {
              crcd = crcd_loss(probs, teacher_probs, uniform_affinity(feats.shape(), layout.seen()), cur_mask,
                               layout, cfg.kl_direction, cfg.crcd_new_classes);
            } else {
              PrototypeList protos = detail::prototype_list(*prev_store, layout.old_classes);
              for (auto& p : detail::prototype_list(running, layout.current_classes)) protos.push_back(std::move(p));
              if (!protos.empty()) {
                crcd = crcd_loss(probs, teacher_probs, affinity(feats, protos, cfg.affinity_temperature), cur_mask,
                                 layout, cfg.kl_direction, cfg.crcd_new_classes);
              }
            }
          }
          if (use_dapd) {
            const ops::SegmentMeans student_locals = ops::segment_mean(fwd.features, sreg, student_pool);
            const bool has_bg = !student_locals.classes.empty() && student_locals.classes.front() == 0;
            if (has_bg) {
              const LocalPrototypes teacher_locals = local_prototypes(
                  detail::stack_batch(tfeat), treg, teacher_pool, PrototypeSource::Teacher);
              dapd = dapd_loss(student_locals, teacher_locals, *prev_store, cfg.weights, layout, cfg.merge_mode);
            }
          }
          loss = total_loss(ce, orcd, crcd, dapd, cfg.weights);
        }
        const double lv = loss.value().item();
        if (!std::isfinite(lv)) {
          throw NumericError("non-finite loss at step " + std::to_string(t) + ", epoch " + std::to_string(epoch) +
                             ", batch starting at " + std::to_string(start));
        }
        tape.backward(loss);
        std::vector<const Array*> grads;
        for (Var p : fwd.params) grads.push_back(tape.has_grad(p) ? &tape.grad(p) : nullptr);
        sgd.step(net.parameters(), grads);
        running.accumulate(fwd.features.value(), gt, layout.current_classes);
        epoch_loss += lv;
        ++batches;
      }
      if (opt.log) {
        *opt.log << "[" << cfg.method << "] step " << t << " epoch " << epoch + 1 << "/" << cfg.epochs
                 << " loss " << epoch_loss / static_cast<double>(batches) << '\n';
      }
    }

    std::vector<std::vector<int>> regions;
    regions.reserve(cache.size());
    for (const auto& cv : cache) regions.push_back(cv.student_regions);
    PrototypeStore store = finalize_step_globals(snapshot_freeze(net, static_cast<int>(t)), ds, regions,
                                                 layout.seen(), static_cast<int>(t), prev_store);
    result.step_prototypes.push_back(std::move(store));
    prev_store = &result.step_prototypes.back();
    result.step_models.push_back(net);

    if (artifacts) {
      net.save(result.output_dir / "checkpoints" / ("step_" + std::to_string(t) + ".ckpt"), static_cast<int>(t));
      prev_store->save(result.output_dir / "prototypes" / ("step_" + std::to_string(t) + ".proto"));
    }

    const std::vector<int> seen = layout.seen();
    const std::map<int, double> per_class = detail::evaluate(net, test, seen);
    for (const auto& [c, d] : per_class) {
      result.report.per_class.push_back({static_cast<int>(t), c, d, cfg.method});
    }
    // Joint training reports against the protocol's Old/New grouping.
    const std::size_t through = cfg.joint_training ? protocol.num_steps() : t;
    result.report.summary.push_back({static_cast<int>(t), cfg.method, aggregate_metrics(per_class, protocol, through)});
    if (opt.log) {
      const Aggregate& a = result.report.summary.back().agg;
      *opt.log << "[" << cfg.method << "] step " << t << " DSC old " << a.old_dsc << " new "
               << (a.new_dsc ? std::to_string(*a.new_dsc) : std::string("-")) << " all " << a.all_dsc << '\n';
    }
  }
  if (write) {
    write_metrics_csv(result.output_dir / "metrics.csv", {result.report});
    write_summary_csv(result.output_dir / "summary.csv", {result.report});
    detail::write_text(result.output_dir / "resolved.conf", config_to_text(cfg));
    if (artifacts) write_summary_svg(result.output_dir / "summary.svg", {result.report});
  }
  return result;
}

}  // namespace cisseg
