#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "crfill/config.hpp"
#include "crfill/train.hpp"

using namespace crfill;

TEST_CASE("flat config parsing") {
  auto c = Config::parse_string("# comment\n lr = 0.001  # trailing\n\nbatch=8\nlr=0.002\n");
  CHECK(c.get("lr") == "0.002");
  CHECK(c.get("batch") == "8");
  CHECK(c.entries().size() == 2);
  CHECK_FALSE(c.has("seed"));
  CHECK_THROWS_AS(c.get("seed"), ConfigError);
  CHECK_THROWS_AS(Config::parse_string("lr 0.1\n"), ConfigError);
  CHECK_THROWS_AS(Config::parse_string("=3\n"), ConfigError);

  c.apply_override("batch = 2");
  CHECK(c.get("batch") == "2");
  CHECK_THROWS_AS(c.apply_override("batch"), ConfigError);
  CHECK(c.serialize() == "batch=2\nlr=0.002\n");
  CHECK(Config::parse_string(c.serialize()).entries() == c.entries());
  CHECK_THROWS_AS(Config::load("/nonexistent/crfill.cfg"), ConfigError);
}

TEST_CASE("typed values") {
  CHECK(parse_int("k", "-3") == -3);
  CHECK_THROWS_AS(parse_int("k", "3.5"), ConfigError);
  CHECK(parse_uint("k", "18446744073709551615") == 18446744073709551615ull);
  CHECK_THROWS_AS(parse_uint("k", "-1"), ConfigError);
  CHECK(parse_double("k", "1e-4") == 1e-4);
  CHECK_THROWS_AS(parse_double("k", "fast"), ConfigError);
  CHECK(parse_switch("k", "on"));
  CHECK_FALSE(parse_switch("k", "false"));
  CHECK_THROWS_AS(parse_switch("k", "maybe"), ConfigError);
  CHECK(split_list(" a, b ,,c") == std::vector<std::string>{"a", "b", "c"});
  CHECK(fnv1a("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("training configuration defaults") {
  const TrainConfig c = train_config_from(Config{});
  CHECK(c.weights.lambda == 0.5);
  CHECK(c.weights.beta == 1.5);
  CHECK(c.weights.alpha == 10.0);
  CHECK(c.lr == 1e-4);
  CHECK(c.adam_beta1 == 0.5);
  CHECK(c.adam_beta2 == 0.999);
  CHECK(c.cr);
  CHECK(c.data.crop == 64);
  CHECK(c.nets.generator.base_width == 16);

  const TrainConfig paper = train_config_from(Config::parse_string("scale=paper\n"));
  CHECK(paper.data.crop == 256);
  CHECK(paper.nets.generator.base_width == 48);
  CHECK(paper.nets.generator.dilations == std::vector<int>{2, 4, 8, 16});
}

TEST_CASE("training configuration round trip and errors") {
  auto c = train_config_from(Config::parse_string(
      "seed=9\nlambda=0.25\ncr=off\nmask_kinds=blob,square\nfamilies=checker\ndilations=2,4\ncrop=32\ntile=8\n"));
  CHECK(c.seed == 9);
  CHECK_FALSE(c.cr);
  CHECK(c.masks.kinds == std::vector<MaskKind>{MaskKind::kBlob, MaskKind::kSquare});
  CHECK(c.data.families == std::vector<TextureFamily>{TextureFamily::kChecker});
  const Config full = to_config(c);
  CHECK(full.entries().size() == config_keys().size() - 1);  // "scale" is an input-only shorthand
  const TrainConfig again = train_config_from(full);
  CHECK(to_config(again).serialize() == full.serialize());
  CHECK(config_hash(again) == config_hash(c));

  CHECK_THROWS_AS(train_config_from(Config::parse_string("learning_rate=1\n")), UnknownKeyError);
  CHECK_THROWS_AS(train_config_from(Config::parse_string("lr=0\n")), ConfigError);
  CHECK_THROWS_AS(train_config_from(Config::parse_string("lambda=-1\n")), std::invalid_argument);
  CHECK_THROWS_AS(train_config_from(Config::parse_string("tile=24\n")), ConfigError);
  CHECK_THROWS_AS(train_config_from(Config::parse_string("mask_kinds=object\n")), ConfigError);
  CHECK_THROWS_AS(train_config_from(Config::parse_string("scale=huge\n")), ConfigError);
  CHECK_THROWS_AS(train_config_from(Config::parse_string("data_source=folder\n")), ConfigError);
  CHECK_THROWS_AS(train_config_from(Config::parse_string("batch=0\n")), ConfigError);
}

TEST_CASE("config hash ignores run-control keys only") {
  const TrainConfig base = train_config_from(Config{});
  TrainConfig longer = base;
  longer.max_steps = 99999;
  longer.log_every = 7;
  longer.workers = 2;
  longer.eval_samples = 5;
  longer.ckpt_every = 10;
  CHECK(config_hash(longer) == config_hash(base));
  TrainConfig other = base;
  other.lr = 2e-4;
  CHECK(config_hash(other) != config_hash(base));
  other = base;
  other.seed = 2;
  CHECK(config_hash(other) != config_hash(base));
}

TEST_CASE("relative data folders resolve under the data root") {
  ::setenv("CRFILL_DATA_ROOT", "/data/root", 1);
  CHECK(resolve_data_folder("places") == "/data/root/places");
  CHECK(resolve_data_folder("/abs/places") == "/abs/places");
  ::unsetenv("CRFILL_DATA_ROOT");
  CHECK(resolve_data_folder("places") == "places");
}
