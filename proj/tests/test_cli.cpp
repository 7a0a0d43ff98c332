#include <doctest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mcffa/config.hpp"
#include "mcffa/metrics.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

class Workspace {
 public:
  explicit Workspace(const std::string& name) : dir_(fs::temp_directory_path() / ("mcffa_cli_" + name)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Workspace() { fs::remove_all(dir_); }

  const fs::path& dir() const { return dir_; }
  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  Run run(const std::string& args) const {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && '" MCFFA_CLI "' " + args + " >'" + out.string() + "' 2>'" +
                            err.string() + "'";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  void synth(std::size_t per_class, const std::string& name = "data") const {
    const Run r = run("synth --per-class " + std::to_string(per_class) + " --out " + name);
    REQUIRE(r.code == 0);
  }

 private:
  fs::path dir_;
};

const std::string kData = " --data-csv data/labels.csv --image-dir data/images";

}  // namespace

TEST_CASE("train without a label file exits 2 naming the flag") {
  Workspace ws("missing_flag");
  const Run r = ws.run("train --preset micro");
  CHECK(r.code == 2);
  CHECK(r.err.find("--data-csv") != std::string::npos);
}

TEST_CASE("micro training run writes every artifact quickly") {
  Workspace ws("train_smoke");
  ws.synth(8);
  const auto t0 = std::chrono::steady_clock::now();
  const Run r = ws.run("train --preset micro --max-epochs 5 --out run" + kData);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  REQUIRE(r.code == 0);
  CHECK(seconds < 60);
  for (const char* f : {"best.mcff", "last.mcff", "epochs.csv", "effective.cfg", "report.csv", "confusion.csv"}) {
    CHECK_MESSAGE(fs::exists(ws.dir() / "run" / f), f);
  }
  CHECK(lines_of(slurp(ws.dir() / "run" / "epochs.csv")).size() == 6);
  CHECK(r.out.find("accuracy") != std::string::npos);
}

TEST_CASE("deterministic runs with the same seed produce identical bytes") {
  Workspace ws("determinism");
  ws.synth(8);
  const std::string args = "train --preset micro --max-epochs 4 --seed 7 --deterministic" + kData;
  REQUIRE(ws.run(args + " --out a").code == 0);
  REQUIRE(ws.run(args + " --out b").code == 0);
  CHECK(slurp(ws.dir() / "a" / "epochs.csv") == slurp(ws.dir() / "b" / "epochs.csv"));
  CHECK(slurp(ws.dir() / "a" / "report.csv") == slurp(ws.dir() / "b" / "report.csv"));
  const std::string ckpt = slurp(ws.dir() / "a" / "best.mcff");
  REQUIRE(ws.run(args + " --out a").code == 0);
  CHECK(slurp(ws.dir() / "a" / "best.mcff") == ckpt);
}

TEST_CASE("the echoed config reproduces the same effective config") {
  Workspace ws("echo");
  ws.synth(8);
  REQUIRE(ws.run("train --preset micro --max-epochs 2 --seed 3 --set model.se_ratio=4 --set augment.hflip=false"
                 " --out a" + kData)
              .code == 0);
  const std::string first = slurp(ws.dir() / "a" / "effective.cfg");
  CHECK(first.find("model.se_ratio = 4") != std::string::npos);
  REQUIRE(ws.run("train --config a/effective.cfg").code == 0);
  CHECK(slurp(ws.dir() / "a" / "effective.cfg") == first);
  CHECK(mcffa::render_config(mcffa::parse_config(first)) == first);
}

TEST_CASE("config errors exit 2") {
  Workspace ws("config_errors");
  ws.synth(2);
  CHECK(ws.run("train --preset micro --set model.colour=red" + kData).code == 2);
  CHECK(ws.run("train --preset micro --set train.batch_size=many" + kData).code == 2);
  CHECK(ws.run("train --preset tiny" + kData).code == 2);
  CHECK(ws.run("train --bogus-flag").code == 2);
  {
    std::ofstream(ws.dir() / "bad.cfg") << "preset = micro\nthis line has no equals sign\n";
  }
  const Run r = ws.run("train --config bad.cfg" + kData);
  CHECK(r.code == 2);
  CHECK(r.err.find("bad.cfg:2") != std::string::npos);
}

TEST_CASE("unreadable data exits 3") {
  Workspace ws("data_errors");
  ws.synth(2);
  CHECK(ws.run("train --preset micro --data-csv nope.csv --image-dir data/images").code == 3);
  { std::ofstream(ws.dir() / "data" / "labels.csv", std::ios::app) << "ghost,1,0,0,0\n"; }
  CHECK(ws.run("train --preset micro" + kData).code == 3);
}

TEST_CASE("diverging training exits 4") {
  Workspace ws("numeric");
  ws.synth(4);
  const Run r = ws.run("train --preset micro --max-epochs 3 --lr 1e30 --set train.optimizer=sgd" + kData);
  CHECK(r.code == 4);
  CHECK(r.err.find("non-finite") != std::string::npos);
}

TEST_CASE("kfold writes one row per fold plus the average") {
  Workspace ws("kfold");
  ws.synth(10);
  const Run r = ws.run("kfold --preset micro --folds 4 --max-epochs 2 --out k" + kData);
  REQUIRE(r.code == 0);
  const auto rows = lines_of(slurp(ws.dir() / "k" / "kfold.csv"));
  REQUIRE(rows.size() == 6);
  CHECK(rows[0] == "fold,accuracy,precision,recall,f1");
  CHECK(rows[5].starts_with("avg,"));
  for (std::size_t col = 1; col <= 4; ++col) {
    std::vector<std::int64_t> cents;
    for (std::size_t f = 1; f <= 4; ++f) {
      const auto cells = split(rows[f], ',');
      const auto dot = cells[col].find('.');
      cents.push_back(std::stoll(cells[col].substr(0, dot)) * 100 + std::stoll(cells[col].substr(dot + 1)));
    }
    CHECK(split(rows[5], ',')[col] == mcffa::format_cents(mcffa::mean_cents(cents)));
  }
  CHECK(ws.run("kfold --preset micro --folds 1" + kData).code == 2);
}

TEST_CASE("eval and predict on a trained checkpoint") {
  Workspace ws("eval");
  ws.synth(8);
  REQUIRE(ws.run("train --preset micro --max-epochs 200 --set train.augment=false --set train.restore_best=false"
                 " --out t" + kData)
              .code == 0);
  const Run e1 = ws.run("eval --ckpt t/last.mcff --out e1" + kData);
  REQUIRE(e1.code == 0);
  CHECK(e1.out.starts_with("accuracy  100.00"));
  CHECK(lines_of(slurp(ws.dir() / "e1" / "report.csv"))[1].starts_with("100.00,"));
  REQUIRE(ws.run("eval --ckpt t/last.mcff --out e2" + kData).code == 0);
  CHECK(slurp(ws.dir() / "e1" / "report.csv") == slurp(ws.dir() / "e2" / "report.csv"));
  CHECK(slurp(ws.dir() / "e1" / "confusion.csv") == slurp(ws.dir() / "e2" / "confusion.csv"));

  for (const char* image : {"data/images/synth_0000.ppm", "data/images/synth_0003.ppm"}) {
    const Run p = ws.run(std::string("predict --ckpt t/best.mcff --image ") + image);
    REQUIRE(p.code == 0);
    const auto lines = lines_of(p.out);
    REQUIRE(lines.size() == 5);
    double total = 0, best_p = -1;
    std::string best_name;
    for (std::size_t c = 0; c < 4; ++c) {
      const auto parts = split(lines[c], ' ');
      REQUIRE(parts.size() == 2);
      CHECK(parts[0] == mcffa::kClassNames[c]);
      CHECK(parts[1].size() - parts[1].find('.') - 1 == 6);
      const double v = std::stod(parts[1]);
      total += v;
      if (v > best_p) best_p = v, best_name = parts[0];
    }
    CHECK(std::abs(total - 1.0) <= 1e-5);
    CHECK(lines[4] == "predicted " + best_name);
  }
}

TEST_CASE("checkpoint that does not fit the model exits 5 naming the tensor") {
  Workspace ws("mismatch");
  ws.synth(2);
  REQUIRE(ws.run("train --preset micro --max-epochs 1 --out t" + kData).code == 0);
  const Run r = ws.run("eval --ckpt t/best.mcff --set model.se_ratio=4" + kData);
  CHECK(r.code == 5);
  CHECK(r.err.find("branch0.se.fc1.weight") != std::string::npos);
  {
    std::string bytes = slurp(ws.dir() / "t" / "best.mcff");
    bytes[bytes.size() / 2] ^= 0x10;
    std::ofstream(ws.dir() / "t" / "bad.mcff", std::ios::binary) << bytes;
  }
  CHECK(ws.run("eval --ckpt t/bad.mcff" + kData).code == 5);
}

TEST_CASE("variant sweep parses seven jobs and marks the best row") {
  Workspace ws("variants");
  ws.synth(2);
  {
    std::ofstream f(ws.dir() / "variants.txt");
    f << "# the seven ensemble rows\nA,E,G\nA,E,H\nA,B,F\nA,B,D\nA,B,E\nA,C,E\nA, B, C\n";
  }
  const Run r = ws.run("variants --preset micro --max-epochs 1 --variants-file variants.txt --out v" + kData);
  REQUIRE(r.code == 0);
  const auto rows = lines_of(slurp(ws.dir() / "v" / "variants.csv"));
  REQUIRE(rows.size() == 8);
  CHECK(rows[0] == "variant,accuracy,precision,recall,f1,best");
  CHECK(rows[7].starts_with("\"A,B,C\","));
  int marked = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) marked += rows[i].ends_with(",*");
  CHECK(marked == 1);

  CHECK(ws.run("variants --preset micro --variant A,B,C --variant A,B,C" + kData).code == 2);
  CHECK(ws.run("variants --preset micro --variant A,B,Z" + kData).code == 2);
}

TEST_CASE("gradcheck lists every layer once and exits 0") {
  Workspace ws("gradcheck");
  const Run r = ws.run("gradcheck");
  CHECK(r.code == 0);
  std::map<std::string, int> seen;
  for (const auto& line : lines_of(r.out)) {
    if (line.empty() || line.starts_with("layer")) continue;
    seen[split(line, ' ')[0]]++;
    CHECK(line.find("PASS") != std::string::npos);
  }
  for (const char* layer : {"conv2d", "separable_conv2d", "dense", "batchnorm", "relu", "sigmoid", "softmax",
                            "global_avg_pool", "se_block", "msdrc", "micro_model"}) {
    CHECK_MESSAGE(seen[layer] == 1, layer);
  }
}

TEST_CASE("gradcheck with an injected fault fails naming the layer") {
  Workspace ws("gradcheck_fault");
  const Run r = ws.run("gradcheck --seeds 1 --inject-fault batchnorm");
  CHECK(r.code != 0);
  CHECK(r.err.find("batchnorm") != std::string::npos);
  CHECK(ws.run("gradcheck --inject-fault nope").code == 2);
}
