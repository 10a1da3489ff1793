#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "wavemoe/train.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

std::string binary() {
  const char* bin = std::getenv("WAVEMOE_BIN");
  REQUIRE(bin != nullptr);
  return bin;
}

RunResult run(const std::string& args) {
  const std::string cmd = binary() + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  RunResult result;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe))
    result.output.append(buf.data(), n);
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

fs::path workdir(const std::string& leaf) {
  auto dir = fs::temp_directory_path() / "wavemoe_cli_test" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_sine_csv(const fs::path& path, std::size_t n, double period, double offset = 5.0,
                    std::uint64_t seed = 1) {
  std::ofstream os(path);
  os << "value\n";
  std::mt19937_64 gen(seed);
  for (std::size_t t = 0; t < n; ++t) {
    const double noise = 0.02 * (static_cast<double>(gen() >> 11) * 0x1.0p-53 - 0.5);
    os << offset + std::sin(2.0 * M_PI * static_cast<double>(t) / period) + noise << "\n";
  }
}

const std::string kTinyFlags =
    " --layers 1 --heads 2 --experts 2 --hidden-size 16 --ffn-dim 32"
    " --top-k-attention 8 --patch-length 8";

}  // namespace

TEST_CASE("cli preprocess") {
  const auto dir = workdir("pre");

  SECTION("clean series reports its window counts") {
    fs::create_directories(dir / "in");
    write_sine_csv(dir / "in" / "a.csv", 8192, 48.0);
    const auto res = run("preprocess --input " + (dir / "in").string() +
                         " --format csv --out " + (dir / "c.bin").string());
    INFO(res.output);
    REQUIRE(res.exit_code == 0);
    REQUIRE(res.output.find("2 windows accepted, 0 rejected") != std::string::npos);
    REQUIRE(fs::exists(dir / "c.bin"));
    REQUIRE(fs::exists(dir / "c.bin.run_config.cfg"));
  }
  SECTION("windows of 25% NaN are all rejected as missing") {
    fs::create_directories(dir / "nan");
    {
      std::ofstream os(dir / "nan" / "bad.csv");
      os << "value\n";
      std::mt19937_64 gen(3);
      for (int t = 0; t < 8192; ++t) {
        if (t % 4 == 0)
          os << "not_a_number\n";
        else
          os << std::sin(0.37 * t) + 0.1 * static_cast<double>(gen() % 100) << "\n";
      }
    }
    const auto res = run("preprocess --input " + (dir / "nan").string() +
                         " --format csv --out " + (dir / "n.bin").string());
    INFO(res.output);
    REQUIRE(res.exit_code == 0);
    REQUIRE(res.output.find("0 windows accepted, 2 rejected") != std::string::npos);
  }
  SECTION("empty input dir fails with a clear message") {
    fs::create_directories(dir / "empty");
    const auto res = run("preprocess --input " + (dir / "empty").string() +
                         " --format csv --out " + (dir / "e.bin").string());
    REQUIRE(res.exit_code == 3);
    REQUIRE(res.output.find("no series found") != std::string::npos);
  }
}

TEST_CASE("cli train") {
  const auto dir = workdir("train");
  fs::create_directories(dir / "in");
  write_sine_csv(dir / "in" / "a.csv", 5000, 32.0);
  write_sine_csv(dir / "in" / "b.csv", 5000, 64.0, 2.0, 9);
  const std::string corpus = (dir / "c.bin").string();
  REQUIRE(run("preprocess --input " + (dir / "in").string() + " --format csv --out " + corpus +
              " --window 1024")
              .exit_code == 0);

  SECTION("short run writes logs and checkpoints") {
    const auto res = run("train --corpus " + corpus + " --out " + (dir / "run").string() +
                         kTinyFlags +
                         " --steps 20 --batch-size 2 --train-context 256 --log-interval 5"
                         " --checkpoint-interval 10 --lr 1e-3");
    INFO(res.output);
    REQUIRE(res.exit_code == 0);
    REQUIRE(fs::exists(dir / "run" / "checkpoint_final.wmck"));
    REQUIRE(fs::exists(dir / "run" / "checkpoint_10.wmck"));
    std::ifstream log(dir / "run" / "loss_log.jsonl");
    std::string line;
    std::size_t records = 0;
    while (std::getline(log, line)) {
      REQUIRE_NOTHROW(nlohmann::json::parse(line));
      ++records;
    }
    REQUIRE(records == 4);  // 20 steps / interval 5
  }
  SECTION("--steps 0 checkpoints the initialized weights immediately") {
    const auto res = run("train --corpus " + corpus + " --out " + (dir / "zero").string() +
                         kTinyFlags + " --steps 0 --train-context 256");
    INFO(res.output);
    REQUIRE(res.exit_code == 0);
    auto state = wavemoe::train::load_checkpoint<float>(
        (dir / "zero" / "checkpoint_final.wmck").string());
    REQUIRE(state.step == 0);
  }
  SECTION("missing --corpus flag is a usage error") {
    const auto res = run("train --out " + (dir / "x").string());
    REQUIRE(res.exit_code == 2);
  }
  SECTION("nonexistent corpus path is an i/o error") {
    const auto res = run("train --corpus " + (dir / "nope.bin").string() + " --out " +
                         (dir / "x").string() + kTinyFlags);
    REQUIRE(res.exit_code == 5);
  }
  SECTION("divergence exits with the numeric code after checkpointing") {
    const auto res = run("train --corpus " + corpus + " --out " + (dir / "boom").string() +
                         kTinyFlags +
                         " --steps 50 --batch-size 2 --train-context 256 --lr 1e18"
                         " --clip-norm 0");
    INFO(res.output);
    REQUIRE(res.exit_code == 4);
    bool wrote_abort = false;
    for (const auto& e : fs::directory_iterator(dir / "boom"))
      if (e.path().filename().string().rfind("checkpoint_abort", 0) == 0) wrote_abort = true;
    REQUIRE(wrote_abort);
  }
}

TEST_CASE("cli evaluate and forecast") {
  const auto dir = workdir("eval");
  fs::create_directories(dir / "in");
  write_sine_csv(dir / "in" / "a.csv", 3000, 24.0);
  const std::string corpus = (dir / "c.bin").string();
  REQUIRE(run("preprocess --input " + (dir / "in").string() + " --format csv --out " + corpus +
              " --window 1024")
              .exit_code == 0);
  REQUIRE(run("train --corpus " + corpus + " --out " + (dir / "run").string() + kTinyFlags +
              " --steps 5 --batch-size 2 --train-context 256 --lr 1e-3")
              .exit_code == 0);
  const std::string model = (dir / "run" / "checkpoint_final.wmck").string();

  fs::create_directories(dir / "evaldata");
  write_sine_csv(dir / "evaldata" / "tones.csv", 700, 24.0);

  SECTION("default protocol emits report files and a table") {
    const auto res = run("evaluate --model " + model + " --data " + (dir / "evaldata").string() +
                         " --report " + (dir / "report.jsonl").string());
    INFO(res.output);
    REQUIRE(res.exit_code == 0);
    REQUIRE(res.output.find("Average") != std::string::npos);
    REQUIRE(fs::exists(dir / "report.jsonl"));
    REQUIRE(fs::exists(dir / "report.jsonl.txt"));
    std::ifstream is(dir / "report.jsonl");
    std::string header;
    std::getline(is, header);
    const auto parsed = nlohmann::json::parse(header);
    REQUIRE(parsed["context_length"] == 512);
    REQUIRE(parsed["horizon"] == 96);
  }
  SECTION("misaligned context is rejected up front") {
    const auto res = run("evaluate --model " + model + " --data " + (dir / "evaldata").string() +
                         " --report " + (dir / "r2.jsonl").string() + " --context 500");
    REQUIRE(res.exit_code == 2);
    REQUIRE(res.output.find("divisible") != std::string::npos);
  }
  SECTION("empty data dir fails") {
    fs::create_directories(dir / "nodata");
    const auto res = run("evaluate --model " + model + " --data " + (dir / "nodata").string() +
                         " --report " + (dir / "r3.jsonl").string());
    REQUIRE(res.exit_code == 3);
  }
  SECTION("forecast prints one value per line") {
    const auto res =
        run("forecast --model " + model + " --series " + (dir / "evaldata" / "tones.csv").string() +
            " --horizon 96");
    INFO(res.output);
    REQUIRE(res.exit_code == 0);
    std::istringstream is(res.output);
    std::string line;
    std::size_t numbers = 0;
    while (std::getline(is, line))
      if (!line.empty() && (std::isdigit(line[0]) || line[0] == '-')) ++numbers;
    REQUIRE(numbers == 96);
  }
  SECTION("horizon not divisible by the patch length is rejected") {
    const auto res =
        run("forecast --model " + model + " --series " + (dir / "evaldata" / "tones.csv").string() +
            " --horizon 7");
    REQUIRE(res.exit_code == 2);
  }
  SECTION("series shorter than the context is a data error") {
    write_sine_csv(dir / "short.csv", 100, 24.0);
    const auto res = run("forecast --model " + model + " --series " + (dir / "short.csv").string() +
                         " --horizon 96");
    REQUIRE(res.exit_code == 3);
    REQUIRE(res.output.find("shorter than the context") != std::string::npos);
  }
  SECTION("unwritable plot path is an i/o error") {
    const auto res =
        run("forecast --model " + model + " --series " + (dir / "evaldata" / "tones.csv").string() +
            " --horizon 96 --plot /nonexistent_dir_zzz/plot.svg");
    REQUIRE(res.exit_code == 5);
  }
}

TEST_CASE("cli inspect") {
  const auto dir = workdir("inspect");

  SECTION("config-file mode reports the production parameter budget") {
    {
      std::ofstream os(dir / "base.cfg");
      os << "layers=12\nheads=12\nexperts=8\ntop-k-experts=2\nhidden-size=384\n"
            "ffn-dim=1536\npatch-length=8\ntop-k-attention=10\n";
    }
    const auto res = run("inspect --config " + (dir / "base.cfg").string());
    INFO(res.output);
    REQUIRE(res.exit_code == 0);
    // counts land near the published 226M total / 100M activated budget
    const auto total_pos = res.output.find("total: ");
    REQUIRE(total_pos != std::string::npos);
    const long total = std::stol(res.output.substr(total_pos + 7));
    REQUIRE(total > 192100000);
    REQUIRE(total < 259900000);
    const auto act_pos = res.output.find("+ dense): ");
    REQUIRE(act_pos != std::string::npos);
    const long activated = std::stol(res.output.substr(act_pos + 10));
    REQUIRE(activated > 85000000);
    REQUIRE(activated < 115000000);
  }
  SECTION("checkpoint mode prints grouped blocks") {
    wavemoe::model::ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.n_experts = 2;
    cfg.hidden_size = 16;
    cfg.ffn_dim = 32;
    cfg.top_k_attention = 4;
    const auto weights = wavemoe::model::init_model<float>(cfg);
    const std::string path = (dir / "m.wmck").string();
    wavemoe::ckpt::save_model(path, weights);
    const auto res = run("inspect --model " + path);
    INFO(res.output);
    REQUIRE(res.exit_code == 0);
    REQUIRE(res.output.find("layers.*.experts") != std::string::npos);
    REQUIRE(res.output.find("hidden_size = 16") != std::string::npos);
  }
  SECTION("missing checkpoint is an i/o error") {
    const auto res = run("inspect --model " + (dir / "absent.wmck").string());
    REQUIRE(res.exit_code == 5);
  }
}
