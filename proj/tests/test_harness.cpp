#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cisseg/harness/config.hpp"
#include "cisseg/harness/metrics.hpp"
#include "cisseg/harness/report.hpp"
#include "cisseg/harness/schedule.hpp"
#include "cisseg/harness/trainer.hpp"
#include "test_util.hpp"

using namespace cisseg;

TEST(Schedule, ParsesNotation) {
  const ProtocolSchedule a = ProtocolSchedule::parse("4-4", 8);
  ASSERT_EQ(a.num_steps(), 2u);
  EXPECT_EQ(a.step(1), (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(a.step(2), (std::vector<int>{5, 6, 7, 8}));
  EXPECT_EQ(ProtocolSchedule::parse("2-2", 8).num_steps(), 4u);
  EXPECT_EQ(ProtocolSchedule::parse("4-1", 8).num_steps(), 5u);
  EXPECT_EQ(ProtocolSchedule::parse("7-1", 8).num_steps(), 2u);
  EXPECT_EQ(ProtocolSchedule::parse("4-2", 8).seen_through(2), (std::vector<int>{1, 2, 3, 4, 5, 6}));
}

TEST(Schedule, RejectsBadNotation) {
  EXPECT_THROW(ProtocolSchedule::parse("3-2", 8), ConfigError);
  EXPECT_THROW(ProtocolSchedule::parse("9-1", 8), ConfigError);
  EXPECT_THROW(ProtocolSchedule::parse("4", 8), ConfigError);
  EXPECT_THROW(ProtocolSchedule::parse("0-2", 8), ConfigError);
  EXPECT_THROW(ProtocolSchedule({{1, 2}, {2}}), ConfigError);
}

TEST(Dsc, Examples) {
  const std::vector<int> gt{1, 1, 1, 1, 0, 0, 0, 0};
  EXPECT_EQ(dsc(gt, gt, 1), 1.0);
  EXPECT_EQ(dsc(std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1}, gt, 1), 0.0);
  EXPECT_EQ(dsc(std::vector<int>{1, 1, 0, 0, 1, 1, 0, 0}, gt, 1), 0.5);
  EXPECT_EQ(dsc(gt, gt, 7), 1.0);  // absent from both
  EXPECT_THROW(dsc(std::vector<int>{1}, gt, 1), ShapeError);
}

TEST(Aggregate, OldNewAll) {
  const ProtocolSchedule s({{1, 2}, {3}});
  const Aggregate a = aggregate_metrics({{1, 0.9}, {2, 0.8}, {3, 0.7}}, s);
  EXPECT_NEAR(a.old_dsc, 0.85, 1e-15);
  EXPECT_NEAR(*a.new_dsc, 0.70, 1e-15);
  EXPECT_NEAR(a.all_dsc, 0.80, 1e-15);
  const Aggregate one = aggregate_metrics({{1, 0.5}, {2, 0.7}}, ProtocolSchedule({{1, 2}}));
  EXPECT_FALSE(one.new_dsc.has_value());
  EXPECT_EQ(one.old_dsc, one.all_dsc);
  EXPECT_THROW(aggregate_metrics({{1, 0.9}}, s), ArgumentError);
}

TEST(TotalLoss, WeightsAndErrors) {
  const LossWeights w;
  EXPECT_DOUBLE_EQ(total_loss(1.0, 0.2, 0.4, 0.1, w), 1.5);
  EXPECT_EQ(total_loss(0.0, 0.0, 0.0, 0.0, w), 0.0);
  EXPECT_THROW(total_loss(std::nan(""), 0.0, 0.0, 0.0, w), NumericError);
  Tape t;
  Var ce = t.leaf(Array::scalar(1.0), true);
  Var z = t.constant(Array::scalar(0.0));
  Var tot = total_loss(ce, z, z, z, w);
  EXPECT_EQ(tot.value().item(), 1.0);
  t.backward(tot);
  EXPECT_EQ(t.grad(ce)[0], 1.0);
}

TEST(Config, ParsesAndRoundTrips) {
  const RunConfig c = parse_config(
      "# comment\nprotocol = 4-4\nnum_classes = 8\nvolume_size = 32 32 32\nlambda_crcd = 0.25\n"
      "merge_mode = sum\nkl_direction = teacher_student\ntau = inf\n");
  EXPECT_EQ(c.protocol, "4-4");
  EXPECT_EQ(c.volume_size, (Size3{32, 32, 32}));
  EXPECT_EQ(c.weights.crcd, 0.25);
  EXPECT_EQ(c.merge_mode, MergeMode::Sum);
  EXPECT_EQ(c.kl_direction, KlDirection::TeacherStudent);
  EXPECT_TRUE(std::isinf(c.tau));
  const RunConfig back = parse_config(config_to_text(c));
  EXPECT_EQ(config_to_text(back), config_to_text(c));
}

TEST(Config, Defaults) {
  const RunConfig c;
  EXPECT_EQ(c.tau, 0.7);
  EXPECT_EQ(c.momentum, 0.9);
  EXPECT_EQ(c.weights.ll, 0.5);
  EXPECT_EQ(c.weights.lg, 0.1);
  EXPECT_EQ(c.weights.orcd, 1.0);
  EXPECT_EQ(c.weights.crcd, 0.5);
  EXPECT_EQ(c.merge_mode, MergeMode::Sum);
  EXPECT_EQ(c.crcd_new_classes, CrcdNewClassMode::ZeroTarget);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("bogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("tau = 0.5\ntau = 0.6\n"), ConfigError);
  EXPECT_THROW(parse_config("tau = abc\n"), ConfigError);
  EXPECT_THROW(parse_config("merge_mode = median\n"), ConfigError);
  EXPECT_THROW(parse_config("protocol 2-2\n"), ConfigError);
  EXPECT_THROW(parse_config("protocol = 3-2\n"), ConfigError);
  EXPECT_THROW(parse_config("lambda_ll = -1\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/x.conf"), ConfigError);
}

TEST(Config, BaselinePresets) {
  const RunConfig base;
  const RunConfig ft = apply_baseline(base, Baseline::FineTune);
  EXPECT_EQ(ft.weights.orcd + ft.weights.crcd + ft.weights.ll + ft.weights.lg, 0.0);
  EXPECT_FALSE(ft.pseudo_labels);
  EXPECT_EQ(ft.method, "finetune");
  const RunConfig kd = apply_baseline(base, Baseline::PlainKd);
  EXPECT_EQ(kd.affinity, AffinityMode::Uniform);
  EXPECT_EQ(kd.weights.ll + kd.weights.lg, 0.0);
  EXPECT_GT(kd.weights.orcd, 0.0);
  EXPECT_TRUE(apply_baseline(base, Baseline::Offline).joint_training);
}

TEST(Config, OutputRootOverride) {
  RunConfig c;
  c.output_dir = "runs/x";
  setenv(kOutputRootEnv, "/tmp/root", 1);
  EXPECT_EQ(c.resolved_output_dir(), std::filesystem::path("/tmp/root/runs/x"));
  c.output_dir = "/abs/y";
  EXPECT_EQ(c.resolved_output_dir(), std::filesystem::path("/abs/y"));
  unsetenv(kOutputRootEnv);
}

namespace {

RunConfig tiny_config(const std::filesystem::path& out) {
  RunConfig c;
  c.volume_size = {12, 12, 1};
  c.num_volumes = 5;
  c.feature_dim = 4;
  c.epochs = 2;
  c.output_dir = out.string();
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(RunProtocol, DeterministicOutputsAndArtifacts) {
  testutil::TempDir dir("run");
  const RunResult a = run_protocol(tiny_config(dir.path / "a"));
  const RunResult b = run_protocol(tiny_config(dir.path / "b"));
  EXPECT_EQ(slurp(dir.path / "a" / "metrics.csv"), slurp(dir.path / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(dir.path / "a" / "summary.csv"), slurp(dir.path / "b" / "summary.csv"));
  for (int t : {1, 2}) {
    const auto ckpt = dir.path / "a" / "checkpoints" / ("step_" + std::to_string(t) + ".ckpt");
    const auto proto = dir.path / "a" / "prototypes" / ("step_" + std::to_string(t) + ".proto");
    EXPECT_TRUE(SegNet::load(ckpt).first == a.step_models[t - 1]);
    EXPECT_TRUE(PrototypeStore::load(proto) == a.step_prototypes[t - 1]);
  }
  EXPECT_TRUE(std::filesystem::exists(dir.path / "a" / "summary.svg"));
  EXPECT_EQ(parse_config(slurp(dir.path / "a" / "resolved.conf")).output_dir, (dir.path / "a").string());

  ASSERT_EQ(a.report.summary.size(), 2u);
  EXPECT_FALSE(a.report.summary[0].agg.new_dsc.has_value());
  EXPECT_TRUE(a.report.summary[1].agg.new_dsc.has_value());
  // every step's global store holds a recomputed background entry
  for (const auto& s : a.step_prototypes) EXPECT_TRUE(s.contains(0));
  EXPECT_EQ(a.step_models.back().head_outputs(), 5u);
}

TEST(RunProtocol, SummaryMatchesPerClassRows) {
  testutil::TempDir dir("run_sum");
  RunConfig c = tiny_config(dir.path);
  c.save_artifacts = false;
  const RunResult r = run_protocol(c);
  const ProtocolSchedule s = ProtocolSchedule::parse(c.protocol, c.num_classes);
  for (const StepSummary& st : r.report.summary) {
    std::map<int, double> per;
    for (const ClassScore& cs : r.report.per_class)
      if (cs.step == st.step) per[cs.cls] = cs.dsc;
    const Aggregate again = aggregate_metrics(per, s, static_cast<std::size_t>(st.step));
    EXPECT_EQ(again.old_dsc, st.agg.old_dsc);
    EXPECT_EQ(again.all_dsc, st.agg.all_dsc);
  }
  EXPECT_FALSE(std::filesystem::exists(dir.path / "checkpoints"));
}

TEST(RunProtocol, OfflineIsSingleJointStep) {
  testutil::TempDir dir("run_off");
  RunConfig c = apply_baseline(tiny_config(dir.path), Baseline::Offline);
  const RunResult r = run_protocol(c);
  ASSERT_EQ(r.report.summary.size(), 1u);
  EXPECT_TRUE(r.report.summary[0].agg.new_dsc.has_value());  // grouped by the protocol
  EXPECT_EQ(r.step_models[0].head_outputs(), 5u);
}

TEST(Report, CsvLayout) {
  MetricsReport r;
  r.method = "ours";
  r.per_class = {{1, 1, 0.5, "ours"}, {1, 2, 0.25, "ours"}};
  r.summary = {{1, "ours", Aggregate{0.375, std::nullopt, 0.375}}};
  EXPECT_EQ(metrics_csv({r}), "step,class,dsc,method\n1,1,0.5,ours\n1,2,0.25,ours\n");
  EXPECT_EQ(summary_csv({r}), "step,method,old,new,all\n1,ours,0.375,,0.375\n");
  const std::string svg = summary_svg({r});
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("ours"), std::string::npos);
}

TEST(Config, SampleConfigsLoad) {
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(CISSEG_CONFIG_DIR)) {
    if (e.path().extension() != ".conf") continue;
    SCOPED_TRACE(e.path().string());
    EXPECT_NO_THROW(load_config(e.path()));
    ++n;
  }
  EXPECT_GE(n, 3u);
}

TEST(Config, DefaultSampleMatchesAcceptanceProtocol) {
  const RunConfig c = load_config(std::filesystem::path(CISSEG_CONFIG_DIR) / "default.conf");
  EXPECT_EQ(c.protocol, "2-2");
  EXPECT_EQ(c.num_classes, 4);
  EXPECT_EQ(c.volume_size, (Size3{64, 64, 1}));
  EXPECT_EQ(c.merge_mode, MergeMode::WeightedMean);
  EXPECT_EQ(c.crcd_new_classes, CrcdNewClassMode::Skip);
}
