#include <gtest/gtest.h>

#include <cmath>

#include "simflow/config.hpp"

using namespace simflow;

TEST(Config, SerializeParseRoundTrip) {
  ExperimentConfig c;
  c.seed = 77;
  c.sigma_bar = 0.1 + 0.2;  // needs all 17 digits
  c.lr = 3.3e-4;
  c.noise_mode = "slerp";
  c.layers_per_block = {1, 2, 3, 4};
  c.encoder_hidden = {7, 5};
  c.detach_flow = true;
  c.class_id = 1;
  c.out = "runs/with space";
  const auto back = parse_config(serialize_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_config(back), serialize_config(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c;
  EXPECT_EQ(parse_config(serialize_config(c)), c);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, CommentsAndBlankLines) {
  const auto c = parse_config("# header\n\nseed = 5   # trailing\n  sigma_bar=0.25\n");
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.sigma_bar, 0.25);
}

TEST(Config, UnknownKeyNamesLine) {
  try {
    parse_config("seed = 1\nsigmabar = 0.5\n");
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("sigmabar"), std::string::npos) << msg;
  }
}

TEST(Config, BadValuesAndLines) {
  EXPECT_THROW(parse_config("seed = abc\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("seed 1\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("detach_flow = maybe\n"), std::invalid_argument);
  ExperimentConfig c;
  EXPECT_THROW(set_config_value(c, "no_such", "1"), std::invalid_argument);
  set_config_value(c, "noise_mode", "linear");
  EXPECT_EQ(get_config_value(c, "noise_mode"), "linear");
}

TEST(Config, ValidateRejectsInconsistentFields) {
  ExperimentConfig c;
  c.layers_per_block = {1, 1};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.noise_mode = "pink";
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, EveryKeyIsReadable) {
  const ExperimentConfig c;
  for (const auto& k : config_keys()) {
    EXPECT_FALSE(k.doc.empty()) << k.key;
    ExperimentConfig d;
    set_config_value(d, k.key, get_config_value(c, k.key));
    EXPECT_EQ(d, c) << k.key;
  }
}

TEST(Config, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.30000000000000004}) {
    EXPECT_EQ(std::stod(format_double(v)), v);
  }
}

TEST(Config, DerivedConfigs) {
  ExperimentConfig c;
  c.patch_size = 2;
  const auto f = c.flow_config({8, 8, 1}, 2);
  EXPECT_EQ(f.token_count, 16u);
  EXPECT_EQ(f.num_classes, 2u);
  c.conditional = false;
  EXPECT_EQ(c.flow_config({8, 8, 1}, 2).num_classes, 0u);
  EXPECT_EQ(c.adamw_config().total_steps, c.steps);
}
