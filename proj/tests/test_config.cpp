#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "histoperm/config.hpp"
#include "tmpdir.hpp"

using namespace histoperm;
using nlohmann::json;

namespace {

template <class E>
std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected exception was not thrown";
  return {};
}

}  // namespace

TEST(ConfigDefaults, PretrainSchedule) {
  const RunConfig c;
  EXPECT_EQ(c.pretrain.epochs, 50u);
  EXPECT_EQ(c.pretrain.batch_size, 256u);
  EXPECT_DOUBLE_EQ(c.pretrain.lr, 0.45);
  EXPECT_DOUBLE_EQ(c.pretrain.warmup_epochs, 5.0);
  EXPECT_DOUBLE_EQ(c.pretrain.lars.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.pretrain.lars.weight_decay, 1e-6);
  const LrSchedule s = c.pretrain_schedule();
  EXPECT_DOUBLE_EQ(lr_at(s, 5.0), 0.45);
}

TEST(ConfigDefaults, MethodHyperparameters) {
  const RunConfig c;
  EXPECT_DOUBLE_EQ(c.alpha, 0.75);
  EXPECT_TRUE(c.histoperm_enabled);
  EXPECT_DOUBLE_EQ(c.byol_tau, 0.97);
  EXPECT_DOUBLE_EQ(c.simclr_temperature, 1.0);
  EXPECT_DOUBLE_EQ(c.vicreg.lambda_s, 25.0);
  EXPECT_DOUBLE_EQ(c.vicreg.mu_v, 25.0);
  EXPECT_DOUBLE_EQ(c.vicreg.nu_c, 1.0);
  EXPECT_DOUBLE_EQ(c.vicreg.epsilon, 1e-4);
  EXPECT_EQ(c.byol_heads.hidden, 4096u);
  EXPECT_EQ(c.byol_heads.output, 256u);
  EXPECT_EQ(c.vicreg_heads.hidden, 2048u);
  EXPECT_EQ(c.vicreg_heads.output, 2048u);
  EXPECT_EQ(c.preset, "CropBlurFlip");
}

TEST(ConfigDefaults, EvaluationAndSweep) {
  const RunConfig c;
  EXPECT_EQ(c.linear.epochs, 80u);
  EXPECT_EQ(c.linear.batch_size, 256u);
  EXPECT_DOUBLE_EQ(c.linear.lr, 0.2);
  EXPECT_EQ(c.supervised.epochs, 40u);
  EXPECT_EQ(c.supervised.batch_size, 16u);
  EXPECT_DOUBLE_EQ(c.supervised.lr, 1e-4);
  EXPECT_DOUBLE_EQ(c.supervised.decay_factor, 0.85);
  EXPECT_DOUBLE_EQ(c.supervised.weight_decay, 1e-4);
  EXPECT_EQ(c.sweep.alphas, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
  EXPECT_EQ(c.sweep.seeds, 3u);
  EXPECT_NO_THROW(c.validate());
}

TEST(ConfigJson, EmptyDocumentGivesDefaults) {
  EXPECT_EQ(config_to_json(config_from_json(json::object())), config_to_json(RunConfig{}));
}

TEST(ConfigJson, RoundTripIsExact) {
  RunConfig c;
  c.method = Method::vicreg;
  c.alpha = 0.3;
  c.histoperm_enabled = false;
  c.encoder_hidden = {64, 32};
  c.vicreg.lambda_s = 0.1;
  c.pretrain.lars.trust_coefficient = 0.02;
  c.generator.rho = 0.6;
  c.generator.image_size = 16;
  c.sweep.alphas = {0.0, 1.0};
  c.seed = 12345678901234ull;
  c.workers = 3;
  const json j = config_to_json(c);
  const RunConfig back = config_from_json(j);
  EXPECT_EQ(config_to_json(back).dump(), j.dump());
  EXPECT_EQ(back.generator.image_size, 16u);
  // Derived fields follow the image size rather than the serialized text.
  EXPECT_EQ(back.supervised.out_size, 16u);
}

TEST(ConfigJson, DefaultsTextParsesBack) {
  const json j = json::parse(default_config_text());
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_EQ(default_config_text().back(), '\n');
}

TEST(ConfigJson, PartialOverlayKeepsSiblings) {
  const RunConfig c = config_from_json(json::parse(R"({"pretrain": {"epochs": 7}, "method": "simclr"})"));
  EXPECT_EQ(c.pretrain.epochs, 7u);
  EXPECT_EQ(c.pretrain.batch_size, 256u);
  EXPECT_DOUBLE_EQ(c.pretrain.lr, 0.45);
  EXPECT_EQ(c.method, Method::simclr);
}

TEST(ConfigJson, GeneratorClassBalanceIsAccepted) {
  const RunConfig c = config_from_json(json::parse(R"({"generator": {"n_classes": 2}})"));
  EXPECT_EQ(c.generator.n_classes, 2u);
}

TEST(ConfigErrors, UnknownKeyNamesItsPath) {
  const auto top = message_of<ConfigError>([] { config_from_json(json::parse(R"({"epochs": 3})")); });
  EXPECT_NE(top.find("'epochs'"), std::string::npos) << top;
  const auto nested = message_of<ConfigError>([] { config_from_json(json::parse(R"({"model": {"foo": 1}})")); });
  EXPECT_NE(nested.find("'model.foo'"), std::string::npos) << nested;
  const auto deep =
      message_of<ConfigError>([] { config_from_json(json::parse(R"({"model": {"byol_heads": {"width": 1}}})")); });
  EXPECT_NE(deep.find("'model.byol_heads.width'"), std::string::npos) << deep;
}

TEST(ConfigErrors, WrongTypeNamesSection) {
  const auto m = message_of<ConfigError>([] { config_from_json(json::parse(R"({"pretrain": {"lr": "fast"}})")); });
  EXPECT_NE(m.find("'pretrain'"), std::string::npos) << m;
  EXPECT_THROW(config_from_json(json::parse(R"({"histoperm": {"enabled": 1.5}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"seed": -1})")), ConfigError);
}

TEST(ConfigErrors, UnknownMethodIsUsageError) {
  EXPECT_THROW(config_from_json(json::parse(R"({"method": "moco"})")), ConfigError);
}

TEST(ConfigValidation, RejectsOutOfRangeValues) {
  auto bad = [](const char* text) {
    const RunConfig c = config_from_json(json::parse(text));
    EXPECT_THROW(c.validate(), ConfigError) << text;
  };
  bad(R"({"histoperm": {"alpha": 1.5}})");
  bad(R"({"histoperm": {"alpha": -0.1}})");
  bad(R"({"preset": "Sepia"})");
  bad(R"({"pretrain": {"epochs": 0}})");
  bad(R"({"pretrain": {"batch_size": 1}})");
  bad(R"({"generator": {"rho": 0}})");
  bad(R"({"sweep": {"alphas": []}})");
  bad(R"({"sweep": {"alphas": [0.5, 2]}})");
  bad(R"({"sweep": {"seeds": 0}})");
  bad(R"({"byol": {"tau": 1.5}})");
  bad(R"({"simclr": {"temperature": 0}})");
}

TEST(ConfigValidation, DatasetPathSkipsGeneratorChecks) {
  RunConfig c;
  c.dataset = "/somewhere";
  c.generator.rho = 0.0;
  EXPECT_NO_THROW(c.validate());
}

TEST(ConfigSemantics, DisabledHistoPermMeansAlphaZero) {
  RunConfig c;
  c.alpha = 0.9;
  EXPECT_DOUBLE_EQ(c.effective_alpha(), 0.9);
  c.histoperm_enabled = false;
  EXPECT_DOUBLE_EQ(c.effective_alpha(), 0.0);
}

TEST(ConfigSemantics, MethodConfigPicksHeadsForMethod) {
  RunConfig c;
  c.simclr_heads = {100, 10};
  c.vicreg_heads = {200, 20};
  c.method = Method::simclr;
  auto m = c.method_config(32);
  EXPECT_EQ(m.input_dim, 32u * 32u * 3u);
  EXPECT_EQ(m.head_hidden, 100u);
  EXPECT_EQ(m.head_output, 10u);
  c.method = Method::vicreg;
  m = c.method_config(8);
  EXPECT_EQ(m.input_dim, 8u * 8u * 3u);
  EXPECT_EQ(m.head_hidden, 200u);
  EXPECT_EQ(m.head_output, 20u);
}

TEST(ConfigFiles, MissingFileIsIoError) {
  TempDir dir;
  EXPECT_THROW(load_config(dir / "absent.json"), IoError);
}

TEST(ConfigFiles, MalformedJsonIsUsageError) {
  TempDir dir;
  spit(dir / "bad.json", "{\"seed\": ");
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
}

TEST(ConfigFiles, DeskProfileLoads) {
  const RunConfig c = load_config(std::filesystem::path(HISTOPERM_SOURCE_DIR) / "configs" / "desk.json");
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.pretrain.epochs, 30u);
  EXPECT_DOUBLE_EQ(c.pretrain.lars.trust_coefficient, 0.02);
  // The invariance term sums over embedding columns; the profile divides the
  // weight of 25 by the 512-wide embedding.
  EXPECT_DOUBLE_EQ(c.vicreg.lambda_s, 25.0 / 512.0);
  EXPECT_EQ(c.vicreg_heads.output, 512u);
  EXPECT_EQ(c.byol_heads.output, 128u);
  EXPECT_DOUBLE_EQ(c.alpha, 0.75);
}

TEST(ConfigErrors, NegativeCountsAreRejected) {
  for (const char* text : {R"({"pretrain": {"epochs": -3}})", R"({"model": {"encoder_hidden": [64, -1]}})",
                           R"({"generator": {"patches_per_slide": -8}})", R"({"workers": 1.5})",
                           R"({"generator": {"slides_per_class": {"dev": -1}}})"}) {
    EXPECT_THROW(config_from_json(json::parse(text)), ConfigError) << text;
  }
}
