// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <functional>
#include <set>

#include "hiergan/config.hpp"
#include "hiergan/error.hpp"
#include "test_util.hpp"

using namespace hiergan;

namespace {

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsFollowTheCommonBaseline) {
  RunConfig rc;
  EXPECT_EQ(get_config_value(rc, "lr"), "0.0001");
  EXPECT_EQ(get_config_value(rc, "beta1"), "0.5");
  EXPECT_EQ(get_config_value(rc, "beta2"), "0.999");
  EXPECT_EQ(get_config_value(rc, "batch"), "8");
  EXPECT_EQ(get_config_value(rc, "w_rec"), "10");
  EXPECT_EQ(get_config_value(rc, "regions"), "le,re,n,m");
  EXPECT_EQ(get_config_value(rc, "end_to_end"), "true");
}

TEST(Config, FormatParsesBackToEqualText) {
  RunConfig rc;
  apply_overrides(rc, {"lr=0.0003", "regions=le,m", "prior_n=0.4,0.35,0.3", "group_m=8,9", "w_local=0.25",
                       "seg_widths=8,16,16,32", "train_data=/tmp/x", "deterministic=true"});
  const std::string text = format_config(rc);
  RunConfig back;
  apply_config_text(back, text, "roundtrip");
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(config_hash(back.train), config_hash(rc.train));
  EXPECT_EQ(back.train.regions, (RegionSet{true, false, false, true}));
  EXPECT_DOUBLE_EQ(back.train.priors[2].left, 0.35);
}

TEST(Config, FileSyntaxCommentsAndLineNumbers) {
  RunConfig rc;
  apply_config_text(rc, "# comment\n\n iterations = 77  # trailing\nbatch=3\n", "cfg");
  EXPECT_EQ(rc.train.iterations, 77);
  EXPECT_EQ(rc.train.batch, 3);
  const std::string msg = message_of([] {
    RunConfig c;
    apply_config_text(c, "batch = 2\nno equals sign\n", "my.cfg");
  });
  EXPECT_NE(msg.find("my.cfg:2"), std::string::npos) << msg;
}

TEST(Config, UnknownKeyAndBadValueNameTheKey) {
  RunConfig rc;
  EXPECT_NE(message_of([&] { apply_overrides(rc, {"bogus_key=1"}); }).find("bogus_key"), std::string::npos);
  EXPECT_NE(message_of([&] { apply_overrides(rc, {"batch=eight"}); }).find("batch"), std::string::npos);
  EXPECT_NE(message_of([&] { apply_overrides(rc, {"regions=le,ear"}); }).find("regions"), std::string::npos);
  EXPECT_NE(message_of([&] { apply_overrides(rc, {"end_to_end=maybe"}); }).find("end_to_end"), std::string::npos);
  EXPECT_THROW(apply_overrides(rc, {"no_equals"}), ConfigError);
}

TEST(Config, LaterOverridesWin) {
  RunConfig rc;
  apply_overrides(rc, {"seed=1", "seed=9"});
  EXPECT_EQ(rc.train.seed, 9u);
}

TEST(Config, ValidationListsEveryOffendingKey) {
  RunConfig rc;
  apply_overrides(rc, {"batch=0", "w_cls=-1", "temperature=0"});
  const std::string msg = message_of([&] { validate_run_config(rc); });
  for (const char* key : {"batch", "w_cls", "temperature"}) EXPECT_NE(msg.find(key), std::string::npos) << key;
  RunConfig ok;
  EXPECT_NO_THROW(validate_run_config(ok));
}

TEST(Config, HashIgnoresPathsAndRunLength) {
  TrainConfig a, b;
  b.iterations = 123;
  b.train_data = "/elsewhere";
  b.checkpoint_interval = 7;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.optimizer.lr = 2e-4;
  EXPECT_NE(config_hash(a), config_hash(b));
  TrainConfig c;
  c.regions[3] = false;
  EXPECT_NE(config_hash(a), config_hash(c));
}

TEST(Config, FileLoadAndResolvedEcho) {
  const auto dir = testutil::scratch_dir("config_file");
  {
    std::ofstream f(dir / "run.cfg");
    f << "iterations = 12\nw_fusion = 0.5\n";
  }
  RunConfig rc = load_config_file(dir / "run.cfg");
  EXPECT_EQ(rc.train.iterations, 12);
  EXPECT_DOUBLE_EQ(rc.train.weights.fusion, 0.5);
  const auto path = write_resolved_config(rc, dir / "out");
  RunConfig again = load_config_file(path);
  EXPECT_EQ(format_config(again), format_config(rc));
  const std::string msg = message_of([&] { load_config_file(dir / "missing.cfg"); });
  EXPECT_NE(msg.find("missing.cfg"), std::string::npos) << msg;
}

TEST(Config, SchemaHasUniqueDocumentedKeys) {
  std::set<std::string> names;
  for (const ConfigKey& k : config_schema()) {
    EXPECT_TRUE(names.insert(k.name).second) << k.name;
    EXPECT_FALSE(k.help.empty()) << k.name;
  }
  EXPECT_TRUE(names.count("w_local"));
  EXPECT_TRUE(names.count("d_steps_per_g"));
}
