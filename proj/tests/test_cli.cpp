#include "doctest.h"

#include "ecgclip/cli.hpp"
#include "ecgclip/util.hpp"

#include <cstdlib>
#include <filesystem>
#include <sstream>

using namespace ecgclip;
namespace fs = std::filesystem;

namespace {

fs::path tmp_root() {
    const char* env = std::getenv("ECGCLIP_TMP");
    fs::path p = env ? fs::path(env) : fs::temp_directory_path() / "ecgclip_cli";
    fs::create_directories(p);
    return p;
}

struct Run {
    int code;
    std::string out, err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream o, e;
    const int code = run_cli(args, o, e);
    return {code, o.str(), e.str()};
}

Run must(std::vector<std::string> args) {
    auto r = run(args);
    INFO("args: " << [&] {
        std::string s;
        for (const auto& a : args) s += a + " ";
        return s;
    }() << "\nstderr: " << r.err);
    REQUIRE(r.code == 0);
    return r;
}

// synth -> split -> preprocess -> pretrain -> finetune -> eval into `dir`.
void pipeline(const fs::path& dir) {
    fs::remove_all(dir);
    const std::string d = dir.string();
    must({"synth", "--out", d + "/raw", "--patients", "48", "--labels", "AF:0.4,LBBB:0.3", "--duration", "10", "--seed", "3"});
    must({"split", "--cohort", d + "/raw", "--out", d + "/split.csv", "--ratios", "train:0.5,val:0.25,test:0.25", "--seed", "1"});
    must({"preprocess", "--cohort", d + "/raw", "--out", d + "/prep"});
    must({"pretrain", "--cohort", d + "/prep", "--splits", d + "/split.csv", "--out", d + "/pt", "--batch-size", "8",
          "--epochs", "1", "--lr", "1e-3", "--seed", "5"});
    must({"finetune", "--checkpoint", d + "/pt/encoder.ckpt", "--cohort", d + "/prep", "--splits", d + "/split.csv", "--out",
          d + "/ft", "--iterations", "30", "--eval-interval", "10", "--batch-size", "16", "--warmup", "5", "--lr", "1e-2",
          "--seed", "2"});
    must({"eval", "--scores", d + "/ft/scores_test.csv", "--calibration", d + "/ft/scores_val.csv", "--out", d + "/ev",
          "--n-boot", "100", "--seed", "4"});
}

}  // namespace

TEST_CASE("end-to-end chain is byte-reproducible") {
    const auto root = tmp_root();
    pipeline(root / "a");
    pipeline(root / "b");
    for (const auto* f : {"pt/metrics.csv", "pt/encoder.ckpt", "ft/metrics.csv", "ft/scores_test.csv", "ev/report.csv", "split.csv"}) {
        INFO(f);
        CHECK(read_file(root / "a" / f) == read_file(root / "b" / f));
    }
    const auto manifest = read_file(root / "a" / "pt" / "manifest.ini");
    CHECK(manifest.find("pretrain.tau=0.07") != std::string::npos);
    CHECK(manifest.find("# input ") != std::string::npos);
    CHECK(manifest.find("fnv1a64=") != std::string::npos);
    CHECK(read_file(root / "a" / "ev" / "report.txt").find("[task AF]") != std::string::npos);

    {  // the manifest re-runs the same pretraining
        const auto again = root / "a" / "pt_again";
        must({"--config", (root / "a" / "pt" / "manifest.ini").string(), "pretrain", "--out", again.string()});
        CHECK(read_file(again / "metrics.csv") == read_file(root / "a" / "pt" / "metrics.csv"));
    }
    {  // attribute and tsne on the trained models
        const std::string d = (root / "a").string();
        const auto ids = split(read_file(root / "a" / "prep" / "labels.csv"), '\n');
        const std::string rid = split(ids.at(1), ',').at(0);
        must({"attribute", "--checkpoint", d + "/ft/classifier.ckpt", "--cohort", d + "/prep", "--record", rid, "--task", "AF",
              "--out", d + "/attr.csv", "--steps", "4", "--positive-only"});
        CHECK(read_file(d + "/attr.csv").rfind("lead,sample_index,value,waveform_value\n", 0) == 0);
        must({"tsne", "--checkpoint", d + "/pt/encoder.ckpt", "--cohort", d + "/prep", "--out", d + "/layout.csv",
              "--iterations", "50", "--perplexity", "5"});
        CHECK(split(read_file(d + "/layout.csv"), '\n').size() >= 49);
    }
}

TEST_CASE("eval names a task without positives and exits 1") {
    const auto dir = tmp_root() / "zero";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_file_atomic(dir / "s.csv", "record_id,task_id,score,label\nr1,AF,0.9,1\nr2,AF,0.1,0\nr1,RBBB,0.3,0\nr2,RBBB,0.2,0\n");
    const auto r = run({"eval", "--scores", (dir / "s.csv").string(), "--out", (dir / "ev").string(), "--no-ci"});
    CHECK(r.code == 1);
    CHECK(r.err.find("RBBB") != std::string::npos);
}

TEST_CASE("compare reports a p value per task and metric") {
    const auto dir = tmp_root() / "cmp";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::string a = "record_id,task_id,score,label\n", b = a;
    for (int i = 0; i < 20; ++i) {
        const int y = i % 2;
        a += "r" + std::to_string(i) + ",AF," + std::to_string(0.2 + 0.6 * y + 0.01 * i) + "," + std::to_string(y) + "\n";
        b += "r" + std::to_string(i) + ",AF," + std::to_string(0.5 + 0.01 * ((i * 7) % 20)) + "," + std::to_string(y) + "\n";
    }
    write_file_atomic(dir / "a.csv", a);
    write_file_atomic(dir / "b.csv", b);
    must({"compare", "--a", (dir / "a.csv").string(), "--b", (dir / "b.csv").string(), "--out", (dir / "o").string(), "--n-perm",
          "500", "--seed", "1"});
    const auto csv = read_file(dir / "o" / "comparison.csv");
    CHECK(csv.find("AF,prauc") != std::string::npos);
    CHECK(csv.find("AF,roauc") != std::string::npos);
    must({"compare", "--a", (dir / "a.csv").string(), "--b", (dir / "a.csv").string(), "--out", (dir / "same").string()});
    const auto rows = parse_csv(read_file(dir / "same" / "comparison.csv"));
    REQUIRE(rows.size() >= 2);
    std::size_t pcol = 0;
    while (pcol < rows[0].size() && rows[0][pcol] != "p_value") ++pcol;
    REQUIRE(pcol < rows[0].size());
    CHECK(std::stod(rows[1][pcol]) == 1.0);
}

TEST_CASE("unknown config keys and bad arguments exit 1") {
    const auto dir = tmp_root() / "cfg";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_file_atomic(dir / "bad.ini", "synth.patients=4\nsynth.bogus_key=1\n");
    const auto r = run({"--config", (dir / "bad.ini").string(), "synth", "--out", (dir / "x").string()});
    CHECK(r.code == 1);
    CHECK(run({"synth"}).code == 1);
    CHECK(run({"nonsense"}).code == 1);
    CHECK(run({"split", "--cohort", "/nonexistent", "--out", (dir / "s.csv").string(), "--ratios", "a:0.3"}).code != 0);
    CHECK(run({"--help"}).code == 0);
}

TEST_CASE("map-labels writes labels and prevalence") {
    const auto dir = tmp_root() / "map";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_file_atomic(dir / "reports.csv", "record_id,report\nr1,Atrial fibrillation with rapid response\nr2,Sinus rhythm\n");
    const auto r = must({"map-labels", "--rules", std::string(ECGCLIP_DATA_DIR) + "/rules/ukb.rules", "--reports",
                         (dir / "reports.csv").string(), "--out", (dir / "labels.csv").string(), "--prevalence",
                         (dir / "prev.csv").string()});
    CHECK(read_file(dir / "labels.csv").find("r1,AF") != std::string::npos);
    CHECK(read_file(dir / "prev.csv").find("AF,1,2,1 (50.00%)") != std::string::npos);
}
