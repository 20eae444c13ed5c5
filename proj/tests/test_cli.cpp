#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <set>
#include <sstream>

#include "airseg/cli.hpp"
#include "airseg/components.hpp"
#include "airseg/fsutil.hpp"
#include "airseg/inferpost.hpp"
#include "airseg/nifti.hpp"
#include "tmpdir.hpp"

using namespace airseg;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "airseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// One "error: ..." line and nothing else.
bool is_error_line(const Run& r) {
  return r.code != 0 && r.err.rfind("error: ", 0) == 0 && r.err.find('\n') == r.err.size() - 1;
}

std::string slurp(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string f; std::getline(in, f, ',');) out.push_back(f);
  return out;
}

const std::vector<std::string> kTinyArch = {"--backbone_widths", "4", "6", "8", "--bifpn_width", "8",
                                            "--bifpn_repeats", "1", "--head_width", "8"};

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Small phantoms so training stays fast.
std::vector<std::string> small_phantoms(const fs::path& out, int count) {
  return {"phantom", "--out", out.string(), "--count", std::to_string(count), "--depth", "2",
          "--segment_length", "14", "--root_radius", "2.5"};
}

}  // namespace

TEST_CASE("RunConfig: defaults, JSON round trip, unknown keys") {
  const RunConfig d;
  CHECK(d.clip_min == -1024.0);
  CHECK(d.clip_max == 600.0);
  CHECK(d.train.crop_size == 256);
  CHECK(d.threshold == 0.5);
  CHECK(d.connectivity == 26);
  CHECK(d.bd_min_fraction == 0.0);

  RunConfig c;
  c.train.lr0 = 3e-3;
  c.arch.bifpn_width = 8;
  c.threshold = 0.7;
  c.data_dir = "a";
  c.postprocess = false;
  const auto back = run_config_from_json(to_json(c));
  CHECK(to_json(back).dump() == to_json(c).dump());

  CHECK_THROWS_AS(run_config_from_json({{"tresh", 0.5}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json({{"threshold", 1.5}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json({{"connectivity", 18}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json({{"clip_min", 700}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json({{"lr0", -1}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json({{"head_blocks", 2}}), std::invalid_argument);
}

TEST_CASE("cli: usage errors are single error lines") {
  CHECK(is_error_line(cli({})));
  CHECK(is_error_line(cli({"frobnicate"})));
  CHECK(is_error_line(cli({"report", "--bogus", "1"})));
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("cli phantom: files, validation, reproducibility") {
  TempDir tmp;
  auto r = cli({"phantom", "--depth", "3", "--out", (tmp / "d").string()});
  REQUIRE(r.code == 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(tmp / "d")) files += e.is_regular_file();
  CHECK(files == 3);
  CHECK(fs::exists(tmp / "d" / "images" / "phantom_000.nii.gz"));
  CHECK(fs::exists(tmp / "d" / "labels" / "phantom_000.nii.gz"));
  CHECK(fs::exists(tmp / "d" / "truth" / "phantom_000.json"));
  CHECK(r.out.find("7 branches, 3 junctions") != std::string::npos);

  r = cli({"phantom", "--depth", "0", "--out", (tmp / "z").string()});
  CHECK(is_error_line(r));
  CHECK_FALSE(fs::exists(tmp / "z"));

  REQUIRE(cli({"phantom", "--seed", "7", "--out", (tmp / "a").string()}).code == 0);
  REQUIRE(cli({"phantom", "--seed", "7", "--out", (tmp / "b").string()}).code == 0);
  CHECK(slurp(tmp / "a" / "truth" / "phantom_007.json") == slurp(tmp / "b" / "truth" / "phantom_007.json"));
  CHECK(slurp(tmp / "a" / "labels" / "phantom_007.nii.gz") == slurp(tmp / "b" / "labels" / "phantom_007.nii.gz"));

  // --config supplies the spec, flags override it
  write_text_atomic(tmp / "spec.json", R"({"depth": 1, "seed": 2})");
  r = cli({"phantom", "--config", (tmp / "spec.json").string(), "--seed", "4", "--out", (tmp / "c").string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(tmp / "c" / "truth" / "phantom_004.json"));
  CHECK(r.out.find("1 branches") != std::string::npos);
}

TEST_CASE("cli prep: manifest, errors, idempotence, config resolution") {
  TempDir tmp;
  fs::create_directories(tmp / "empty" / "images");
  CHECK(is_error_line(cli({"prep", "--data", (tmp / "empty").string(), "--out", (tmp / "o").string()})));
  CHECK(is_error_line(cli({"prep", "--data", (tmp / "nowhere").string(), "--out", (tmp / "o").string()})));

  REQUIRE(cli({"phantom", "--count", "5", "--out", (tmp / "ph").string()}).code == 0);

  // oracle: every annotated plane of every label
  std::size_t expected = 0;
  for (const auto& [id, path] : list_scans(tmp / "ph" / "labels"))
    expected += annotated_z_indices(read_nifti_mask(path)).size();

  write_text_atomic(tmp / "cfg.json", R"({"seed": 3, "clip_min": -1000})");
  const std::vector<std::string> args = {"prep", "--config", (tmp / "cfg.json").string(), "--seed", "5",
                                         "--data", (tmp / "ph").string(), "--out", (tmp / "prep").string()};
  REQUIRE(cli(args).code == 0);
  const std::string manifest = slurp(tmp / "prep" / "manifest.csv");
  const auto rows = lines(manifest);
  REQUIRE(rows.size() == expected + 1);
  CHECK(rows[0] == "scan_id,z,split");
  std::set<std::string> val_scans;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (fields(rows[i])[2] == "internal_val") val_scans.insert(fields(rows[i])[0]);
  CHECK(val_scans.size() == 1);  // ceil(0.2 * 5)

  const auto resolved = nlohmann::json::parse(slurp(tmp / "prep" / "config.resolved.json"));
  CHECK(resolved.at("seed") == 5);
  CHECK(resolved.at("clip_min") == -1000.0);
  CHECK(resolved.at("clip_max") == 600.0);

  const Volume v = read_nifti_volume(tmp / "prep" / "images" / "phantom_000.nii.gz");
  CHECK(v.kind() == IntensityKind::normalized);
  for (float x : v.data()) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
  }

  const std::string image_bytes = slurp(tmp / "prep" / "images" / "phantom_003.nii.gz");
  REQUIRE(cli(args).code == 0);
  CHECK(slurp(tmp / "prep" / "manifest.csv") == manifest);
  CHECK(slurp(tmp / "prep" / "images" / "phantom_003.nii.gz") == image_bytes);

  // a volume without a mask
  fs::copy_file(tmp / "ph" / "images" / "phantom_000.nii.gz", tmp / "ph" / "images" / "extra.nii.gz");
  auto r = cli({"prep", "--data", (tmp / "ph").string(), "--out", (tmp / "prep2").string()});
  CHECK(is_error_line(r));
  CHECK(r.err.find("extra") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp / "prep2" / "manifest.csv"));

  write_text_atomic(tmp / "bad.json", R"({"seeed": 1})");
  CHECK(is_error_line(cli({"prep", "--config", (tmp / "bad.json").string(), "--data", (tmp / "ph").string(), "--out",
                           (tmp / "prep3").string()})));
}

TEST_CASE("cli train / predict: toy run, resume checks, replay, outputs") {
  TempDir tmp;
  REQUIRE(cli(small_phantoms(tmp / "ph", 5)).code == 0);
  REQUIRE(cli({"prep", "--data", (tmp / "ph").string(), "--out", (tmp / "prep").string()}).code == 0);

  const auto train_args = [&](const fs::path& out) {
    return std::vector<std::string>{"train", "--data", (tmp / "prep").string(), "--out", out.string(), "--epochs", "2",
                                    "--crop", "24", "--lr0", "3e-3", "--batch_size", "8"} +
           kTinyArch;
  };
  auto r = cli(train_args(tmp / "run1"));
  REQUIRE(r.code == 0);
  const auto curve = lines(slurp(tmp / "run1" / "curves.csv"));
  REQUIRE(curve.size() == 3);
  CHECK(curve[0] == "epoch,train_loss,val_loss,val_dice");
  CHECK(fs::exists(tmp / "run1" / "best.ckpt"));
  CHECK(fs::exists(tmp / "run1" / "last.ckpt"));
  CHECK(fs::exists(tmp / "run1" / "config.resolved.json"));

  SUBCASE("seed replay") {
    REQUIRE(cli(train_args(tmp / "run2")).code == 0);
    CHECK(slurp(tmp / "run2" / "curves.csv") == slurp(tmp / "run1" / "curves.csv"));
    CHECK(slurp(tmp / "run2" / "best.ckpt") == slurp(tmp / "run1" / "best.ckpt"));
  }

  SUBCASE("resume refuses a different architecture") {
    r = cli({"train", "--data", (tmp / "prep").string(), "--out", (tmp / "run1").string(), "--epochs", "3", "--crop",
             "24", "--resume", (tmp / "run1" / "last.ckpt").string()});
    CHECK(is_error_line(r));
    CHECK(r.err.find("architecture") != std::string::npos);
  }

  SUBCASE("resume continues an interrupted run exactly") {
    auto three = train_args(tmp / "full");
    three[6] = "3";
    REQUIRE(cli(three).code == 0);
    auto more = train_args(tmp / "run1");
    more[6] = "3";
    more.push_back("--resume");
    more.push_back((tmp / "run1" / "last.ckpt").string());
    REQUIRE(cli(more).code == 0);
    CHECK(slurp(tmp / "run1" / "curves.csv") == slurp(tmp / "full" / "curves.csv"));
    CHECK(slurp(tmp / "run1" / "last.ckpt") == slurp(tmp / "full" / "last.ckpt"));
  }

  SUBCASE("predict") {
    const std::string ck = (tmp / "run1" / "best.ckpt").string();
    REQUIRE(cli({"predict", "--checkpoint", ck, "--data", (tmp / "ph" / "images").string(), "--out",
                 (tmp / "p5").string()})
                .code == 0);
    REQUIRE(cli({"predict", "--checkpoint", ck, "--data", (tmp / "ph" / "images").string(), "--out",
                 (tmp / "p9").string(), "--threshold", "0.9"})
                .code == 0);
    REQUIRE(cli({"predict", "--checkpoint", ck, "--data", (tmp / "ph" / "images" / "phantom_001.nii.gz").string(),
                 "--out", (tmp / "raw").string(), "--no-postprocess"})
                .code == 0);
    for (const auto& [id, path] : list_scans(tmp / "ph" / "images")) {
      CAPTURE(id);
      const Volume in = read_nifti_volume(path);
      const MaskVolume m5 = read_nifti_mask(tmp / "p5" / (id + ".nii.gz"));
      const MaskVolume m9 = read_nifti_mask(tmp / "p9" / (id + ".nii.gz"));
      const Volume prob = read_nifti_volume(tmp / "p5" / "prob" / (id + ".nii.gz"));
      CHECK(m5.dims() == in.dims());
      CHECK(prob.dims() == in.dims());
      CHECK(prob.kind() == IntensityKind::probability);
      CHECK(connected_components(m5, 26).count() <= 1);
      CHECK(m9.count() <= m5.count());
    }
    CHECK(list_scans(tmp / "raw").size() == 1);
    const MaskVolume raw = read_nifti_mask(tmp / "raw" / "phantom_001.nii.gz");
    const Volume prob = read_nifti_volume(tmp / "p5" / "prob" / "phantom_001.nii.gz");
    CHECK(raw.data() == threshold(prob, 0.5).data());
    CHECK(read_nifti_mask(tmp / "p5" / "phantom_001.nii.gz").data() == largest_component(raw, 26).data());

    r = cli({"predict", "--checkpoint", (tmp / "missing.ckpt").string(), "--data", (tmp / "ph" / "images").string(),
             "--out", (tmp / "px").string()});
    CHECK(is_error_line(r));
    CHECK_FALSE(fs::exists(tmp / "px"));
  }
}

TEST_CASE("cli eval: identity, footer, unmatched ids, thread cap") {
  TempDir tmp;
  REQUIRE(cli(small_phantoms(tmp / "ph", 3)).code == 0);
  const std::string gt = (tmp / "ph" / "labels").string();

  auto r = cli({"eval", "--pred", gt, "--data", gt, "--out", (tmp / "e").string()});
  REQUIRE(r.code == 0);
  auto rows = lines(slurp(tmp / "e" / "metrics.csv"));
  REQUIRE(rows.size() == 5);
  const auto footer = fields(rows.back());
  CHECK(footer[0] == "mean±std");
  for (std::size_t col = 1; col <= 5; ++col) {
    const auto cell = footer[col];
    const auto pm = cell.find("±");
    CHECK(std::stod(cell.substr(0, pm)) == (col == 2 || col == 3 ? 0.0 : 1.0));
    CHECK(std::stod(cell.substr(pm + std::string("±").size())) == 0.0);
  }

  // a degraded prediction: footer means equal the hand average of the rows
  fs::create_directories(tmp / "pred");
  std::size_t k = 0;
  for (const auto& [id, path] : list_scans(gt)) {
    MaskVolume m = read_nifti_mask(path);
    std::size_t seen = 0;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i] && ++seen % (k + 3) == 0) m[i] = 0;
    write_nifti(m, tmp / "pred" / (id + ".nii.gz"));
    ++k;
  }
  REQUIRE(cli({"eval", "--pred", (tmp / "pred").string(), "--data", gt, "--out", (tmp / "e2").string()}).code == 0);
  rows = lines(slurp(tmp / "e2" / "metrics.csv"));
  REQUIRE(rows.size() == 5);
  for (std::size_t col = 1; col < fields(rows[0]).size(); ++col) {
    double sum = 0;
    for (std::size_t i = 1; i <= 3; ++i) sum += std::stod(fields(rows[i])[col]);
    const auto cell = fields(rows.back())[col];
    CHECK(std::stod(cell.substr(0, cell.find("±"))) == doctest::Approx(sum / 3).epsilon(1e-12));
  }

  // same result whatever the worker count
  ::setenv("AIRSEG_THREADS", "1", 1);
  REQUIRE(cli({"eval", "--pred", (tmp / "pred").string(), "--data", gt, "--out", (tmp / "t1").string()}).code == 0);
  ::setenv("AIRSEG_THREADS", "4", 1);
  REQUIRE(cli({"eval", "--pred", (tmp / "pred").string(), "--data", gt, "--out", (tmp / "t4").string()}).code == 0);
  CHECK(slurp(tmp / "t1" / "metrics.csv") == slurp(tmp / "t4" / "metrics.csv"));
  ::setenv("AIRSEG_THREADS", "zero", 1);
  CHECK(is_error_line(cli({"eval", "--pred", (tmp / "pred").string(), "--data", gt, "--out", (tmp / "tz").string()})));
  ::unsetenv("AIRSEG_THREADS");

  // disjoint ids
  fs::create_directories(tmp / "other");
  write_nifti(read_nifti_mask(tmp / "pred" / "phantom_000.nii.gz"), tmp / "other" / "stranger.nii.gz");
  r = cli({"eval", "--pred", (tmp / "other").string(), "--data", gt, "--out", (tmp / "e3").string()});
  CHECK(is_error_line(r));
  CHECK(r.err.find("stranger") != std::string::npos);
  CHECK(r.err.find("phantom_002") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp / "e3" / "metrics.csv"));
}

TEST_CASE("cli report: single row, empty dir, ordering") {
  TempDir tmp;
  fs::create_directories(tmp / "empty");
  REQUIRE(cli({"report", "--data", (tmp / "empty").string(), "--out", (tmp / "r0").string()}).code == 0);
  CHECK(slurp(tmp / "r0" / "report.csv") == std::string(kReportCsvHeader) + "\n");

  fs::create_directories(tmp / "m");
  MaskVolume m({10, 4, 4}, {1.0, 1.0, 1.25});
  for (std::size_t x = 0; x < 10; ++x) m.at(x, 2, 3) = 1;
  write_nifti(m, tmp / "m" / "scan_a.nii.gz");
  REQUIRE(cli({"report", "--data", (tmp / "m").string(), "--out", (tmp / "r1").string()}).code == 0);
  CHECK(slurp(tmp / "r1" / "report.csv") == std::string(kReportCsvHeader) + "\nscan_a,10,12.5,0,2,3,9,2,3,1\n");

  write_nifti(m, tmp / "m" / "c.nii");
  write_nifti(MaskVolume({3, 3, 3}, {1, 1, 1}), tmp / "m" / "b.nii.gz");
  REQUIRE(cli({"report", "--data", (tmp / "m").string(), "--out", (tmp / "r2").string()}).code == 0);
  const auto rows = lines(slurp(tmp / "r2" / "report.csv"));
  REQUIRE(rows.size() == 4);
  CHECK(fields(rows[1])[0] == "b");
  CHECK(fields(rows[2])[0] == "c");
  CHECK(fields(rows[3])[0] == "scan_a");

  CHECK(is_error_line(cli({"report", "--data", (tmp / "nope").string(), "--out", (tmp / "r3").string()})));
}
