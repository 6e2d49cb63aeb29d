#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vesselforge/cli.hpp"

using namespace vesselforge;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, {out, err});
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(testing::TempDir()) / ("vf_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::string tiny_flags_file(const fs::path& dir) {
  const auto p = dir / "tiny.cfg";
  write(p,
        "[model]\ndepth = 2\nwidths = 2,4,8\npatch_size = 8\ncls_hidden = 6\n"
        "[train]\nmax_epochs = 1\nsteps_per_epoch = 2\nbatch_size = 2\n"
        "[data]\npositives_per_site = 2\nmax_offset = 2\nnegatives_per_subject = 2\n"
        "[infer]\nn_patches = 4\n");
  return p.string();
}

}  // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
  const auto c = cli::config_from_text("");
  EXPECT_EQ(c.exp.loss.phi, 0.3);
  EXPECT_EQ(c.exp.loss.beta, 0.5);
  EXPECT_EQ(c.exp.data.vesselness.sigma, 1.0);
  EXPECT_EQ(c.exp.data.vesselness.alpha1, 0.5);
  EXPECT_EQ(c.exp.data.vesselness.alpha2, 2.0);
  EXPECT_EQ(c.exp.model.patch_size, 64);
}

TEST(Config, RangeErrorRejected) {
  try {
    cli::config_from_text("loss.phi = 1.5\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("phi"), std::string::npos);
  }
}

TEST(Config, AllOffendersListed) {
  try {
    cli::config_from_text("loss.phi = 1.5\nfoo.bar = 1\ntrain.lr0 = fast\n[model]\nbogus = 2\n");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    for (const char* s : {"phi", "foo.bar", "train.lr0", "model.bogus", "4 problems"})
      EXPECT_NE(m.find(s), std::string::npos) << s << " in " << m;
  }
}

TEST(Config, MalformedLineRejected) { EXPECT_THROW(cli::config_from_text("loss.phi 0.3\n"), ConfigError); }

TEST(Config, FlagsOverrideFileOverrideDefaults) {
  const auto dir = scratch("precedence");
  write(dir / "a.cfg", "train.lr0 = 0.01\ntrain.seed = 5\n");
  const auto c = cli::build_config(dir / "a.cfg", {{"train.lr0", "0.001", "--lr0"}});
  EXPECT_EQ(c.exp.train.lr0, 0.001);
  EXPECT_EQ(c.exp.train.seed, 5u);
  EXPECT_EQ(c.exp.train.batch_size, 4);
}

TEST(Config, JsonMatchesKeyValue) {
  const auto a = cli::config_from_text(
      R"({"loss": {"phi": 0.4}, "model": {"widths": [4, 8, 16], "depth": 2, "patch_size": 16},
          "infer": {"tta": false, "tta_transforms": ["identity", "flip_x"]}, "vesselness.measure": "frangi"})");
  const auto b = cli::config_from_text(
      "loss.phi = 0.4\n[model]\nwidths = 4,8,16\ndepth = 2\npatch_size = 16\n[infer]\ntta = false\n"
      "tta_transforms = identity, flip_x\nvesselness.measure = frangi\n");
  EXPECT_EQ(cli::snapshot(a), cli::snapshot(b));
  EXPECT_EQ(a.exp.model.widths, (std::vector<int>{4, 8, 16}));
  EXPECT_FALSE(a.exp.infer.tta.enabled);
  EXPECT_EQ(a.exp.data.vesselness.measure, VesselnessMeasure::frangi);
}

TEST(Config, SnapshotRoundTrips) {
  auto c = cli::config_from_text(
      "loss.phi = 0.123456789012345\ntrain.seed = 18446744073709551615\nphantom.spacing = 0.5,0.6,0.7\n"
      "vesselness.extra_sigmas = 1.5,2\nmodel.variant = vessel_attblock_only\ninfer.cls_gate = true\n");
  const auto text = cli::snapshot(c, "vesselforge test");
  const auto back = cli::config_from_text(text);
  EXPECT_EQ(cli::snapshot(back, "vesselforge test"), text);
  EXPECT_EQ(back.exp.loss.phi, 0.123456789012345);
  EXPECT_EQ(back.exp.train.seed, 18446744073709551615ULL);
  EXPECT_EQ(back.exp.model.variant, Variant::vessel_attblock_only);
  // Every registered key appears exactly once.
  for (const auto& k : cli::registry()) {
    const auto leaf = k.name.substr(k.section().size() + 1) + " = ";
    EXPECT_NE(text.find("\n" + leaf), std::string::npos) << k.name;
  }
}

TEST(Config, RegistryKeysUniqueAndDocumented) {
  std::set<std::string> seen;
  for (const auto& k : cli::registry()) {
    EXPECT_TRUE(seen.insert(k.name).second) << k.name;
    EXPECT_FALSE(k.help.empty()) << k.name;
  }
}

TEST(Dispatch, VesselnessWithReferenceDefaults) {
  const auto dir = scratch("vesselness");
  PhantomSpec spec;
  spec.dims = {32, 32, 32};
  const auto ph = generate_phantom(spec);
  nifti::write_volume(ph.image, dir / "img.nii");
  const auto r = run({"vesselness", "--in", (dir / "img.nii").string(), "--out", (dir / "ves.nii").string(), "--sigma",
                      "1.0", "--alpha1", "0.5", "--alpha2", "2.0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto got = nifti::read_volume(dir / "ves.nii");
  const auto expect = vesselness_map(nifti::read_volume(dir / "img.nii"), VesselnessParams{});
  EXPECT_EQ(got.data, expect.data);
  EXPECT_TRUE(fs::exists(dir / "config.snapshot"));
}

TEST(Dispatch, PhantomRerunIsIdentical) {
  const auto dir = scratch("phantom");
  for (const char* sub : {"a", "b"}) {
    const auto r = run({"phantom", "--subjects", "3", "--seed", "7", "--phantom.dims", "32,32,32", "--out",
                        (dir / sub).string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(slurp(dir / "a" / "manifest.json"), slurp(dir / "b" / "manifest.json"));
  EXPECT_EQ(slurp(dir / "a" / "sub-001_image.nii"), slurp(dir / "b" / "sub-001_image.nii"));
  for (const char* sub : {"config.snapshot", "logs", "checkpoints", "reports"}) EXPECT_TRUE(fs::exists(dir / "a" / sub));
}

TEST(Dispatch, MissingRequiredFlagNamesIt) {
  const auto r = run({"vesselness", "--out", "x.nii"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--in"), std::string::npos);
  EXPECT_NE(r.err.find("\"error\""), std::string::npos);
}

TEST(Dispatch, UnknownSubcommandOrFlag) {
  auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  r = run({"vesselness", "--in", "a", "--out", "b", "--no-such-flag", "1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(run({}).code, 1);
}

TEST(Dispatch, ValidationErrorExitsOne) {
  const auto r = run({"vesselness", "--in", "a.nii", "--out", "b.nii", "--alpha1", "3", "--alpha2", "2"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("alpha1"), std::string::npos);
}

TEST(Dispatch, RuntimeFailureExitsTwo) {
  const auto dir = scratch("runtime");
  const auto r = run({"vesselness", "--in", (dir / "missing.nii").string(), "--out", (dir / "v.nii").string()});
  EXPECT_EQ(r.code, 2);
  const auto line = r.err.substr(0, r.err.find('\n'));
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("exit_code"), 2);
  EXPECT_EQ(j.at("error"), "io");
}

TEST(Dispatch, BadThreadsEnvironment) {
  ::setenv("VESSELFORGE_THREADS", "many", 1);
  const auto r = run({"vesselness", "--in", "a.nii", "--out", "b.nii"});
  ::unsetenv("VESSELFORGE_THREADS");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("VESSELFORGE_THREADS"), std::string::npos);
}

TEST(Dispatch, HelpListsEveryFlagWithDefaults) {
  for (const std::string cmd : {"phantom", "vesselness", "patches", "train", "infer", "evaluate", "ablate"}) {
    const auto r = run({cmd, "--help"});
    ASSERT_EQ(r.code, 0);
    const cli::RunConfig defaults;
    for (const auto& section : cli::sections_for(cmd))
      for (const auto& k : cli::registry()) {
        if (k.section() != section) continue;
        EXPECT_NE(r.out.find("--" + k.name), std::string::npos) << cmd << " " << k.name;
        EXPECT_NE(r.out.find("[default: " + k.get(defaults) + "]"), std::string::npos) << k.name;
        if (!k.reference.empty()) {
          EXPECT_NE(r.out.find("[reference: " + k.reference + "]"), std::string::npos) << k.name;
        }
      }
  }
}

TEST(Dispatch, EndToEndLayout) {
  const auto dir = scratch("e2e");
  const auto cfg = tiny_flags_file(dir);
  const auto data = (dir / "data").string();
  ASSERT_EQ(run({"phantom", "--subjects", "5", "--phantom.dims", "32,32,32", "--dataset.test_fraction", "0.2", "--out", data}).code, 0);

  auto r = run({"patches", "--config", cfg, "--manifest", data, "--out", (dir / "patches").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "patches" / "patches" / "index.json"));

  r = run({"train", "--config", cfg, "--manifest", data, "--out", (dir / "train").string(), "--lr0", "0.002"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* p : {"config.snapshot", "logs/train.csv", "checkpoints/best.json", "checkpoints/best.bin",
                        "reports/train_summary.json"})
    EXPECT_TRUE(fs::exists(dir / "train" / p)) << p;
  const auto snap = cli::load_config(dir / "train" / "config.snapshot");
  EXPECT_EQ(snap.exp.train.lr0, 0.002);
  EXPECT_EQ(snap.exp.model.patch_size, 8);

  const auto ck = (dir / "train" / "checkpoints" / "best").string();
  r = run({"infer", "--config", cfg, "--checkpoint", ck, "--in", data + "/sub-000_image.nii", "--out",
           (dir / "infer").string(), "--id", "s0"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* p : {"reports/s0_mask.nii", "reports/s0_prob.nii", "reports/s0_detections.json"})
    EXPECT_TRUE(fs::exists(dir / "infer" / p)) << p;

  r = run({"evaluate", "--config", cfg, "--checkpoint", ck, "--manifest", data, "--out", (dir / "eval").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "eval" / "reports" / "evaluation.csv"));
  EXPECT_NE(r.out.find("sensitivity"), std::string::npos);

  r = run({"ablate", "--config", cfg, "--manifest", data, "--out", (dir / "ablate").string(), "--variants", "no_tta,full"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "ablate" / "reports" / "ablation.csv"));
  r = run({"ablate", "--config", cfg, "--manifest", data, "--out", (dir / "ablate2").string(), "--variants", "full,nope"});
  EXPECT_EQ(r.code, 1);
}
