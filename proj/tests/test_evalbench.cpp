#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "wavemoe/evalbench.hpp"

using namespace wavemoe;
using namespace wavemoe::eval;
using std::vector;

namespace {

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_experts = 2;
  c.top_k_experts = 2;
  c.hidden_size = 8;
  c.ffn_dim = 16;
  c.patch_length = 8;
  c.top_k_attention = 8;
  c.seed = 3;
  return c;
}

std::filesystem::path temp_dir(const std::string& leaf) {
  auto dir = std::filesystem::temp_directory_path() / "wavemoe_eval_test" / leaf;
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("metrics") {
  SECTION("identity and unit shift") {
    const vector<double> a{1, 2, 3};
    auto [mse0, mae0] = metrics(a, a);
    REQUIRE(mse0 == 0.0);
    REQUIRE(mae0 == 0.0);
    const vector<double> b{2, 3, 4};
    auto [mse1, mae1] = metrics(b, a);
    REQUIRE(mse1 == 1.0);
    REQUIRE(mae1 == 1.0);
  }
  SECTION("hand case") {
    auto [mse, mae] = metrics(vector<double>{1, 2}, vector<double>{0, 0});
    REQUIRE(mse == 2.5);
    REQUIRE(mae == 1.5);
  }
  SECTION("symmetry") {
    std::mt19937_64 gen(7);
    vector<double> a(32), b(32);
    for (auto& v : a) v = static_cast<double>(gen() >> 11) * 0x1.0p-53;
    for (auto& v : b) v = static_cast<double>(gen() >> 11) * 0x1.0p-53;
    REQUIRE(metrics(a, b) == metrics(b, a));
  }
  SECTION("length mismatch rejected") {
    REQUIRE_THROWS_AS(metrics(vector<double>{1}, vector<double>{1, 2}), ContractError);
  }
}

TEST_CASE("naive baselines") {
  vector<double> context(512);
  for (std::size_t t = 0; t < context.size(); ++t)
    context[t] = std::sin(2.0 * M_PI * static_cast<double>(t) / 24.0);

  SECTION("persistence repeats the last value") {
    context.back() = 7.0;
    const auto b = naive_baselines(context, 96);
    REQUIRE(b.persistence.size() == 96);
    for (double v : b.persistence) REQUIRE(v == 7.0);
  }
  SECTION("seasonal naive continues a period-24 signal exactly") {
    const auto b = naive_baselines(context, 96, 24);
    vector<double> truth(96);
    for (int h = 0; h < 96; ++h)
      truth[h] = std::sin(2.0 * M_PI * static_cast<double>(512 + h) / 24.0);
    auto [mse, mae] = metrics(b.seasonal, truth);
    REQUIRE(mse < 1e-20);
  }
  SECTION("season larger than the context is rejected") {
    REQUIRE_THROWS_AS(naive_baselines(context, 96, 513), ContractError);
  }
}

TEST_CASE("rollout") {
  const auto weights = model::init_model<float>(tiny_model());

  SECTION("96 / 8 means twelve generation steps, finite output") {
    vector<float> context(512);
    std::mt19937_64 gen(5);
    for (auto& v : context)
      v = std::sin(0.2f * static_cast<float>(&v - context.data())) +
          0.01f * static_cast<float>(static_cast<double>(gen() >> 11) * 0x1.0p-53);
    const auto out = rollout(weights, context, 96);
    REQUIRE(out.size() == 96);
    for (float v : out) REQUIRE(std::isfinite(v));
  }
  SECTION("constant context stays finite under the degenerate-variance rule") {
    vector<float> context(512, 42.0f);
    const auto out = rollout(weights, context, 96);
    REQUIRE(out.size() == 96);
    for (float v : out) REQUIRE(std::isfinite(v));
  }
  SECTION("deterministic") {
    vector<float> context(512);
    for (std::size_t t = 0; t < context.size(); ++t)
      context[t] = std::cos(0.05f * static_cast<float>(t));
    REQUIRE(rollout(weights, context, 96) == rollout(weights, context, 96));
  }
  SECTION("misaligned context rejected") {
    vector<float> context(500, 1.0f);
    REQUIRE_THROWS_AS(rollout(weights, context, 96), ContractError);
    vector<float> ok_context(512, 1.0f);
    REQUIRE_THROWS_AS(rollout(weights, ok_context, 7), ContractError);
  }
  SECTION("non-finite context rejected") {
    vector<float> context(512, 1.0f);
    context[100] = std::numeric_limits<float>::quiet_NaN();
    REQUIRE_THROWS_AS(rollout(weights, context, 96), ContractError);
  }
}

TEST_CASE("benchmark harness") {
  const auto weights = model::init_model<float>(tiny_model());
  const auto dir = temp_dir("datasets");

  // dataset A: 3 clean channels, long enough
  {
    std::ofstream os((dir / "alpha.csv").string());
    os << "ch1,ch2,ch3\n";
    for (int t = 0; t < 1000; ++t)
      os << std::sin(0.1 * t) << ',' << std::cos(0.07 * t) + 2.0 << ',' << 0.5 * std::sin(0.3 * t)
         << "\n";
  }
  // dataset B: one long series and one too short (gets skipped)
  {
    std::ofstream os((dir / "beta.jsonl").string());
    os << R"({"id":"long","values":[)";
    for (int t = 0; t < 700; ++t) os << (t ? "," : "") << std::sin(0.2 * t);
    os << "]}\n";
    os << R"({"id":"short","values":[1,2,3]})" << "\n";
  }

  EvalTask task;
  task.context_length = 512;
  task.horizon = 96;

  SECTION("per-dataset rows, skip accounting, average row") {
    const auto report = run_benchmark(weights, dir.string(), task);
    REQUIRE(report.per_dataset.size() == 2);
    REQUIRE(report.per_dataset[0].dataset == "alpha");
    REQUIRE(report.per_dataset[0].n_series == 3);
    REQUIRE(report.per_dataset[1].dataset == "beta");
    REQUIRE(report.per_dataset[1].n_series == 1);
    REQUIRE(report.per_dataset[1].skipped == 1);
    REQUIRE_FALSE(report.skip_log.empty());

    const double want_mse =
        (report.per_dataset[0].mse + report.per_dataset[1].mse) / 2.0;
    REQUIRE(std::abs(report.average.mse - want_mse) < 1e-12);
    const double want_mae =
        (report.per_dataset[0].mae + report.per_dataset[1].mae) / 2.0;
    REQUIRE(std::abs(report.average.mae - want_mae) < 1e-12);
  }
  SECTION("report files and table render") {
    const auto report = run_benchmark(weights, dir.string(), task);
    const auto rpath = (temp_dir("out") / "report.jsonl").string();
    write_report(report, rpath);
    std::ifstream is(rpath);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(is, line)) {
      REQUIRE_NOTHROW(nlohmann::json::parse(line));
      ++lines;
    }
    REQUIRE(lines >= 4);  // header + 2 datasets + average
    const auto table = render_table(report);
    REQUIRE(table.find("Average") != std::string::npos);
    REQUIRE(table.find("alpha") != std::string::npos);
  }
  SECTION("plots are emitted when requested") {
    BenchmarkOptions opts;
    const auto pdir = temp_dir("plots");
    opts.plot_dir = pdir.string();
    run_benchmark(weights, dir.string(), task, opts);
    std::size_t svg_count = 0;
    for (const auto& e : std::filesystem::directory_iterator(pdir))
      if (e.path().extension() == ".svg") ++svg_count;
    REQUIRE(svg_count == 4);
    // sanity: the files are svg documents
    std::ifstream is(std::filesystem::directory_iterator(pdir)->path());
    std::string head;
    std::getline(is, head);
    REQUIRE(head.find("<svg") != std::string::npos);
  }
  SECTION("worker count does not change results") {
    const auto a = run_benchmark(weights, dir.string(), task);
    BenchmarkOptions opts;
    opts.workers = 3;
    const auto b = run_benchmark(weights, dir.string(), task, opts);
    for (std::size_t i = 0; i < a.per_dataset.size(); ++i) {
      REQUIRE(a.per_dataset[i].mse == b.per_dataset[i].mse);
      REQUIRE(a.per_dataset[i].mae == b.per_dataset[i].mae);
    }
  }
  SECTION("empty directory rejected") {
    const auto empty = temp_dir("empty");
    REQUIRE_THROWS_AS(run_benchmark(weights, empty.string(), task), DataError);
  }
}
