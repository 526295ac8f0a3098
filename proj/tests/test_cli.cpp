#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "lily/config.hpp"

namespace fs = std::filesystem;
using namespace lily;

namespace {

KeyValues kv_of(const std::string& text) {
  std::istringstream in(text);
  return parse_key_values(in);
}

std::string config_error_key(const std::string& text, Command cmd) {
  try {
    parse_run_config(kv_of(text), cmd);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<none>";
}

const char* kTinyModel =
    "n_layers = 2\nd_model = 8\nn_heads = 2\nd_ff = 12\nvocab = 10\nseq_len = 4\nn_classes = 3\n"
    "n_train = 32\nn_val = 16\nepochs = 2\nbatch_size = 16\n";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

/// Runs the CLI in a fresh directory; returns the exit status.
struct CliRun {
  fs::path dir;
  int status = -1;
  std::string err;

  fs::path out() const { return dir / "out"; }
};

CliRun run_cli(const std::string& name, const std::string& config, const std::string& args) {
  CliRun r;
  r.dir = fs::temp_directory_path() / ("lily_cli_test_" + name);
  fs::remove_all(r.dir);
  fs::create_directories(r.dir);
  std::ofstream(r.dir / "run.cfg") << config;
  const std::string cmd = std::string("'") + LILY_CLI_PATH + "' " + args + " --config '" + (r.dir / "run.cfg").string() +
                          "' --out '" + r.out().string() + "' > '" + (r.dir / "stdout.txt").string() + "' 2> '" +
                          (r.dir / "stderr.txt").string() + "'";
  const int raw = std::system(cmd.c_str());
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.err = slurp(r.dir / "stderr.txt");
  return r;
}

}  // namespace

TEST(ConfigFile, CommentsBlankLinesAndWhitespace) {
  auto kv = kv_of("# header\n\n  rank_r = 8   # trailing\nplacement=qv\n");
  EXPECT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv.at("rank_r"), "8");
  EXPECT_EQ(kv.at("placement"), "qv");
}

TEST(ConfigFile, SyntaxErrors) {
  EXPECT_THROW(kv_of("rank_r 8\n"), ConfigError);
  EXPECT_THROW(kv_of("= 8\n"), ConfigError);
  try {
    kv_of("lr = 1\nlr = 2\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "lr");
  }
}

TEST(RunConfig, ErrorsNameTheOffendingKey) {
  EXPECT_EQ(config_error_key("method = lily\n", Command::train), "rank_r");
  EXPECT_EQ(config_error_key("method = lora\n", Command::train), "lora_r");
  EXPECT_EQ(config_error_key("rank_r = 4\n", Command::train), "method");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = 4\nrankr = 2\n", Command::train), "rankr");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = four\n", Command::train), "rank_r");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = -3\n", Command::train), "rank_r");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = 0\n", Command::train), "rank_r");
  EXPECT_EQ(config_error_key("method = sgd\n", Command::train), "method");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = 4\nlr = 1e-3x\n", Command::train), "lr");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = 4\nrouter_mode = soft\n", Command::train), "router_mode");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = 4\nplacement = attn\n", Command::train), "placement");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = 4\nne_1 = 9\n", Command::train), "ne_1");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = 4\nn_heads = 3\n", Command::train), "n_heads");
  EXPECT_EQ(config_error_key("method = lily\nrank_r = 4\nshare_A = maybe\n", Command::train), "share_A");
  EXPECT_EQ(config_error_key("rank_r = 4\n", Command::rank), "lora_r");
  EXPECT_EQ(config_error_key("rank_r = 4\n", Command::sweep), "sweep_ne");
  EXPECT_EQ(config_error_key("rank_r = 4\nsweep_ne = 1,9\n", Command::sweep), "sweep_ne");
  EXPECT_EQ(config_error_key("flops_reps = 3\n", Command::flops), "flops_reps");
  EXPECT_EQ(config_error_key("train_data = a.csv\n", Command::gradcheck), "val_data");
}

TEST(RunConfig, ParsesValuesAndDefaults) {
  auto c = parse_run_config(kv_of("method = lora\nlora_r = 6\nplacement = qvmlp\nlr_schedule = linear_decay\n"
                                  "seed = 17\nheatmap_layers = 0, 5\nsweep_ne = 1,2,3\nsweep_mode = budgeted\n"),
                            Command::train);
  EXPECT_EQ(c.method, Method::lora);
  EXPECT_EQ(c.lora.rank, 6u);
  EXPECT_EQ(c.lora.placement, Placement::parse("qvmlp"));
  EXPECT_EQ(c.lily.placement, c.lora.placement);
  EXPECT_EQ(c.opt.schedule, Schedule::linear_decay);
  EXPECT_EQ(c.seed, 17u);
  EXPECT_EQ(c.heatmap_layers, (std::vector<std::size_t>{0, 5}));
  EXPECT_EQ(c.sweep_mode, SweepMode::budgeted);
  EXPECT_EQ(c.opt.lr, 5e-3);
  EXPECT_EQ(c.opt.epochs, 30u);
  EXPECT_EQ(c.encoder.n_layers, 6u);
  EXPECT_EQ(c.flops_n, 1024u);
}

TEST(Cli, MissingRankKeyExitsTwoNamingIt) {
  auto r = run_cli("missing", "method = lily\n", "train");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("rank_r"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(r.out() / "loss.csv"));
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli("usage", "", "").status, 2);
  EXPECT_EQ(run_cli("usage2", "", "fly").status, 2);
  EXPECT_EQ(run_cli("usage3", "", "train --tol 3").status, 2);
}

TEST(Cli, TrainWritesArtifactsDeterministically) {
  const std::string cfg = std::string(kTinyModel) + "method = lily\nrank_r = 2\nne_2 = 3\n";
  auto a = run_cli("train_a", cfg, "train");
  auto b = run_cli("train_b", cfg, "train");
  ASSERT_EQ(a.status, 0) << a.err;
  ASSERT_EQ(b.status, 0) << b.err;
  std::set<std::string> produced;
  for (const auto& entry : fs::directory_iterator(a.out())) produced.insert(entry.path().filename().string());
  std::set<std::string> listed;
  std::istringstream manifest(slurp(a.out() / "manifest.txt"));
  for (std::string line; std::getline(manifest, line);) listed.insert(line);
  EXPECT_EQ(produced, listed);
  for (const char* f : {"loss.csv", "accuracy.csv", "routes.csv", "routes_mlp_down.csv", "feature_distance.csv",
                        "adapters.bin", "adapters.manifest"}) {
    ASSERT_TRUE(produced.contains(f)) << f;
    EXPECT_GT(fs::file_size(a.out() / f), 0u) << f;
    EXPECT_EQ(slurp(a.out() / f), slurp(b.out() / f)) << f;
  }
  EXPECT_EQ(slurp(a.out() / "loss.csv").rfind("step,loss\n", 0), 0u);
  EXPECT_EQ(slurp(a.out() / "routes.csv").rfind("epoch,layer,expert,weight\n", 0), 0u);
  EXPECT_EQ(slurp(a.out() / "accuracy.csv").rfind("epoch,val_acc\n", 0), 0u);

  auto c = run_cli("train_c", cfg, "train --seed 5");
  ASSERT_EQ(c.status, 0);
  EXPECT_NE(slurp(a.out() / "loss.csv"), slurp(c.out() / "loss.csv"));

  const std::string plot = std::string("'") + LILY_CLI_PATH + "' plot --out '" + a.out().string() + "' > /dev/null";
  EXPECT_EQ(WEXITSTATUS(std::system(plot.c_str())), 0);
  EXPECT_TRUE(fs::exists(a.out() / "loss.svg"));
  EXPECT_EQ(slurp(a.out() / "loss.svg").rfind("<svg", 0), 0u);
}

TEST(Cli, LoraTrainAndDivergence) {
  auto ok = run_cli("lora", std::string(kTinyModel) + "method = lora\nlora_r = 2\n", "train");
  EXPECT_EQ(ok.status, 0) << ok.err;
  auto bad = run_cli("diverge", std::string(kTinyModel) + "method = lily\nrank_r = 2\nlr = 1e300\nlr_schedule = constant\n",
                     "train");
  EXPECT_EQ(bad.status, 3);
  EXPECT_NE(bad.err.find("step"), std::string::npos) << bad.err;
}

TEST(Cli, GradcheckPassesAndNegativeControlFails) {
  auto ok = run_cli("grad", "", "gradcheck");
  EXPECT_EQ(ok.status, 0) << ok.err;
  const std::string csv = slurp(ok.out() / "gradcheck.csv");
  EXPECT_NE(csv.find("lily/query.R.0"), std::string::npos);
  EXPECT_NE(csv.find("lora/mlp_down.B.1"), std::string::npos);

  auto uni = run_cli("grad_uniform", "router_mode = uniform\n", "gradcheck");
  EXPECT_EQ(uni.status, 0) << uni.err;
  EXPECT_EQ(slurp(uni.out() / "gradcheck.csv").find(".R."), std::string::npos);

  auto bad = run_cli("grad_bad", "", "gradcheck --corrupt-backward");
  EXPECT_EQ(bad.status, 1);
  EXPECT_NE(bad.err.find("worst parameter"), std::string::npos) << bad.err;
}

TEST(Cli, EquivAndFlops) {
  auto eq = run_cli("equiv", "", "equiv");
  EXPECT_EQ(eq.status, 0) << eq.err;
  const std::string rows = slurp(eq.out() / "equiv.csv");
  EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 101);

  auto fl = run_cli("flops", "", "flops");
  EXPECT_EQ(fl.status, 0) << fl.err;
  const std::string csv = slurp(fl.out() / "flops.csv");
  EXPECT_NE(csv.find("103858176"), std::string::npos);
  EXPECT_NE(csv.find("25264128"), std::string::npos);
}

TEST(Cli, RankBudgetViolationExitsTwoBeforeTraining) {
  auto r = run_cli("rank_budget", "rank_r = 16\nlora_r = 1\nepochs = 100000\n", "rank");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("rank_r"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(r.out() / "rank.csv"));
}

TEST(Cli, RankHeatmapAndSweepOnTinyModel) {
  std::string cfg = kTinyModel;
  cfg.replace(cfg.find("n_layers = 2"), 12, "n_layers = 4");
  auto rank = run_cli("rank", cfg + "placement = qv\nrank_r = 2\nlora_r = 2\n", "rank");
  ASSERT_EQ(rank.status, 0) << rank.err;
  const std::string rc = slurp(rank.out() / "rank.csv");
  EXPECT_EQ(std::count(rc.begin(), rc.end(), '\n'), 1 + 5 * 3);

  auto heat = run_cli("heat", cfg + "rank_r = 2\nne_2 = 3\n", "heatmap");
  ASSERT_EQ(heat.status, 0) << heat.err;
  const std::string hc = slurp(heat.out() / "heatmap.csv");
  EXPECT_EQ(hc.rfind("layer,expert,weight\n", 0), 0u);
  EXPECT_EQ(std::count(hc.begin(), hc.end(), '\n'), 1 + 3 * 3);  // layers 0, 2, 3
  EXPECT_TRUE(fs::exists(heat.out() / "heatmap_mlp_up.csv"));

  auto sweep = run_cli("sweep", cfg + "rank_r = 2\nsweep_ne = 1,2,4\n", "sweep");
  ASSERT_EQ(sweep.status, 0) << sweep.err;
  const std::string sc = slurp(sweep.out() / "sweep.csv");
  EXPECT_EQ(sc.rfind("ne,ne_2,rank,params,val_acc\n", 0), 0u);
  EXPECT_EQ(std::count(sc.begin(), sc.end(), '\n'), 4);
}
