// gapan: synth | train | eval | sample | gradcheck
//
// Exit codes: 0 success, 1 verification or numeric failure, 2 usage or I/O error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gapan/gapan.hpp"

using namespace gapan;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", path, "key=value config file");
    cmd->add_option("--set", overrides, "override one key (key=value), repeatable")->take_all();
  }

  RunConfig load() const {
    RunConfig cfg;
    if (!path.empty()) cfg = parse_run_config(io::read_file(path));
    for (const auto& s : overrides) apply_setting(cfg, s);
    return cfg;
  }
};

nlohmann::json config_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  std::istringstream in(canonical_text(cfg));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    j[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return j;
}

std::vector<std::size_t> parse_ks(const std::string& text) {
  RunConfig tmp;
  apply_setting(tmp, "eval_ks=" + text);
  return tmp.train.eval_ks;
}

int cmd_synth(const ConfigArgs& ca, const std::string& train_out, const std::string& test_out, bool text) {
  const RunConfig cfg = ca.load();
  const auto [train, test] = gen_synthetic(cfg.synth);
  if (text) {
    write_feature_text(train, train_out);
    write_feature_text(test, test_out);
  } else {
    write_feature_file(train, train_out);
    write_feature_file(test, test_out);
  }
  std::printf("synth seed=%llu dim=%zu\n", static_cast<unsigned long long>(cfg.synth.seed), cfg.synth.dim);
  std::printf("train: %zu classes, %zu instances -> %s\n", train.class_count(), train.count(), train_out.c_str());
  std::printf("test:  %zu classes, %zu instances -> %s\n", test.class_count(), test.count(), test_out.c_str());
  return kOk;
}

int cmd_train(const ConfigArgs& ca, const std::string& train_path, const std::string& test_path,
              const std::string& out_dir, const std::string& resume) {
  const FeatureDataset train_set = load_feature_file(train_path, Split::Train);
  const FeatureDataset test_set = load_feature_file(test_path, Split::Test);
  check_disjoint(train_set, test_set);
  if (train_set.dim != test_set.dim) throw DatasetError("train/test feature dimensions differ");

  TrainerState<double> st;
  if (!resume.empty()) {
    st = load_checkpoint(resume);
    for (const auto& s : ca.overrides) apply_setting(st.run, s);
    st.run.train.validate();
    if (st.class_labels != train_set.classes()) throw DatasetError("resume: checkpoint classes differ from train file");
  } else {
    st = init_trainer(ca.load(), train_set);
  }
  const RunConfig& cfg = st.run;

  std::filesystem::create_directories(out_dir);
  const std::string metrics_path = (std::filesystem::path(out_dir) / "metrics.jsonl").string();
  const std::string ckpt_path = (std::filesystem::path(out_dir) / "checkpoint.gapc").string();
  std::ofstream metrics(metrics_path, resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw IoError("cannot open '" + metrics_path + "' for writing");
  nlohmann::json header;
  header["record"] = "config";
  header["config"] = config_json(cfg);
  header["train_file"] = train_path;
  header["test_file"] = test_path;
  header["resumed_from_epoch"] = st.epochs_done;
  metrics << header.dump() << "\n";
  std::printf("train seed=%llu epochs=%zu warmup=%zu classes=%zu\n", static_cast<unsigned long long>(cfg.train.seed),
              cfg.train.epochs, cfg.train.warmup_epochs, st.class_labels.size());

  const auto history = run_epochs(st, train_set, test_set, cfg.train.epochs, [&](const EpochMetrics& m) {
    metrics << m.to_json().dump() << "\n";
    metrics.flush();
    std::printf("epoch %zu phase %d loss_total %.6f recall@%zu %.4f\n", m.epoch, m.phase, m.loss_total.value_or(0.0),
                m.recall.front().first, m.recall.front().second);
  });
  save_checkpoint(st, ckpt_path);

  nlohmann::ordered_json final_recall = nlohmann::ordered_json::object();
  if (!history.empty())
    for (const auto& [k, r] : history.back().recall) final_recall["recall@" + std::to_string(k)] = r;
  std::printf("%s\n", final_recall.dump().c_str());
  std::printf("checkpoint -> %s\nmetrics -> %s\n", ckpt_path.c_str(), metrics_path.c_str());
  return kOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& features_path, const std::string& ks_text) {
  const auto st = load_checkpoint(ckpt_path);
  const FeatureDataset ds = load_feature_file(features_path, Split::Test);
  if (ds.dim != st.net.flow.dim)
    throw DatasetError("eval: feature dim " + std::to_string(ds.dim) + " does not match checkpoint dim " +
                       std::to_string(st.net.flow.dim));
  std::vector<std::size_t> ks = ks_text.empty() ? st.run.train.eval_ks : parse_ks(ks_text);
  const std::size_t gallery = ds.count() - 1;
  for (auto& k : ks)
    if (k > gallery) {
      std::fprintf(stderr, "warning: k=%zu exceeds gallery size %zu; clamped\n", k, gallery);
      k = gallery;
    }
  const auto recall = evaluate_recall(st.net.head, ds, std::span<const std::size_t>(ks));
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& [k, r] : recall) out["recall@" + std::to_string(k)] = r;
  std::printf("%s\n", out.dump().c_str());
  return kOk;
}

int cmd_sample(const std::string& ckpt_path, std::uint32_t label, std::size_t n, double d, const std::string& mode,
               std::optional<std::uint64_t> seed, const std::string& out_path) {
  if (!(d > 0.0) || !std::isfinite(d)) throw ArgumentError("sample: truncation radius d must be positive, got " +
                                                           std::to_string(d));
  if (n == 0) throw ArgumentError("sample: n must be positive");
  const auto st = load_checkpoint(ckpt_path);
  if (!st.priors_initialized)
    throw ArgumentError("sample: checkpoint has no class priors yet (joint training never started)");
  const auto it = std::lower_bound(st.class_labels.begin(), st.class_labels.end(), label);
  if (it == st.class_labels.end() || *it != label)
    throw ArgumentError("sample: class " + std::to_string(label) + " is not a training class of this checkpoint");
  const std::size_t k = static_cast<std::size_t>(it - st.class_labels.begin());

  TruncationSpec spec = st.run.train.truncation;
  spec.radius = d;
  if (!mode.empty()) spec.mode = mode == "absolute" ? TruncationMode::Absolute : TruncationMode::ScaledBySqrtDim;
  const std::uint64_t s = seed.value_or(st.run.train.seed);
  const std::vector<std::size_t> cls = {k};
  const auto anchors = generate_anchors(st.net, std::span<const std::size_t>(cls), n, spec, s, st.step);

  FeatureDataset out;
  out.dim = st.net.flow.dim;
  for (const auto& a : anchors.by_class[k]) {
    for (double x : a.feature) out.features.push_back(static_cast<float>(x));
    out.labels.push_back(label);
  }
  write_feature_file(out, out_path);
  std::printf("sample seed=%llu class=%u n=%zu d_eff=%.6g fallbacks=%zu -> %s\n", static_cast<unsigned long long>(s),
              label, n, spec.effective_radius(out.dim), anchors.fallbacks, out_path.c_str());
  return kOk;
}

int cmd_gradcheck(const GradcheckOptions& o) {
  const auto report = run_gradcheck(o);
  bool ok = true;
  std::printf("gradcheck seed=%llu seeds=%zu dim=%zu classes=%zu tol=%g\n",
              static_cast<unsigned long long>(o.base_seed), o.seeds, o.dim, o.num_classes, o.tolerance);
  for (const auto& e : report) {
    std::printf("%-24s max_rel_err %.3e  %s\n", e.component.c_str(), e.max_rel_error, e.passed ? "ok" : "FAIL");
    ok = ok && e.passed;
  }
  if (!ok) {
    for (const auto& e : report)
      if (!e.passed) std::fprintf(stderr, "gradcheck failed: %s\n", e.component.c_str());
    return kVerifyFailed;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GAPan: flow priors, inverse-flow anchors, and prior-guided contrastive alignment"};
  app.require_subcommand(1);

  ConfigArgs synth_cfg, train_cfg;
  std::string train_out = "train.gapf", test_out = "test.gapf";
  bool text = false;
  auto* synth = app.add_subcommand("synth", "write a synthetic seen/unseen feature pair");
  synth_cfg.attach(synth);
  synth->add_option("--train-out", train_out, "train split path")->capture_default_str();
  synth->add_option("--test-out", test_out, "test split path")->capture_default_str();
  synth->add_flag("--text", text, "write the text variant instead of GAPF");

  std::string train_path, test_path, out_dir = "run", resume;
  auto* train_cmd = app.add_subcommand("train", "two-phase training; writes metrics.jsonl and checkpoint.gapc");
  train_cfg.attach(train_cmd);
  train_cmd->add_option("--train", train_path, "train features")->required();
  train_cmd->add_option("--test", test_path, "test features (unseen classes)")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->capture_default_str();
  train_cmd->add_option("--resume", resume, "continue from a checkpoint");

  std::string ckpt, features, ks;
  auto* eval = app.add_subcommand("eval", "Recall@K of a checkpoint's head on a feature file");
  eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval->add_option("--features", features, "feature file")->required();
  eval->add_option("--ks", ks, "comma-separated k values (default: checkpoint eval_ks)");

  std::string sample_ckpt, sample_out = "anchors.gapf", mode;
  std::uint32_t label = 0;
  std::size_t n = 6;
  double d = 1.0;
  std::optional<std::uint64_t> seed;
  auto* sample = app.add_subcommand("sample", "feature-space anchors for one class");
  sample->add_option("--checkpoint", sample_ckpt, "checkpoint file")->required();
  sample->add_option("--class", label, "training class label")->required();
  sample->add_option("-n,--n", n, "number of anchors")->capture_default_str();
  sample->add_option("-d,--d", d, "truncation radius")->capture_default_str();
  sample->add_option("--mode", mode, "truncation mode")->check(CLI::IsMember({"absolute", "scaled"}));
  sample->add_option("--seed", seed, "sampling seed (default: checkpoint seed)");
  sample->add_option("--out", sample_out, "output GAPF path")->capture_default_str();

  GradcheckOptions go;
  auto* grad = app.add_subcommand("gradcheck", "analytic gradients against central differences");
  grad->add_option("--seed", go.base_seed, "first problem seed")->capture_default_str();
  grad->add_option("--seeds", go.seeds, "number of random problems")->capture_default_str();
  grad->add_option("--dim", go.dim, "feature dimension")->capture_default_str();
  grad->add_option("--classes", go.num_classes, "number of classes")->capture_default_str();
  grad->add_option("--layers", go.flow_layers, "coupling layers")->capture_default_str();
  grad->add_option("--hidden", go.flow_hidden, "coupling subnet width")->capture_default_str();
  grad->add_option("--tol", go.tolerance, "relative error tolerance")->capture_default_str();
  grad->add_option("--corrupt", go.corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_cfg, train_out, test_out, text);
    if (*train_cmd) return cmd_train(train_cfg, train_path, test_path, out_dir, resume);
    if (*eval) return cmd_eval(ckpt, features, ks);
    if (*sample) return cmd_sample(sample_ckpt, label, n, d, mode, seed, sample_out);
    if (*grad) return cmd_gradcheck(go);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kVerifyFailed;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  return kUsage;
}
