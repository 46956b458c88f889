#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "ids/image_io.hpp"
#include "ids/ids_net.hpp"
#include "ids/metrics.hpp"
#include "ids/trainer.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ids;

namespace {

std::string g_cli;  // path to the ids binary, passed as the first program arg

int run_cli(const std::string& args) {
    const std::string cmd = g_cli + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return rc == -1 ? -1 : WEXITSTATUS(rc);
}

std::string file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), {});
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is.good());
    std::vector<std::string> lines;
    for (std::string l; std::getline(is, l);) lines.push_back(l);
    return lines;
}

std::string tmp_dir(const std::string& name) {
    const std::string dir = (fs::temp_directory_path() / name).string();
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int count_pngs(const std::string& dir) {
    int n = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") ++n;
    return n;
}

bool dirs_byte_identical(const std::string& a, const std::string& b) {
    std::vector<std::string> fa, fb;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a).string());
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b).string());
    std::sort(fa.begin(), fa.end());
    std::sort(fb.begin(), fb.end());
    if (fa != fb) return false;
    for (const auto& rel : fa) {
        if (rel == "manifest.tsv") continue;  // contains wall-clock duration
        if (file_bytes(a + "/" + rel) != file_bytes(b + "/" + rel)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("synth: 80/20 split, determinism, profile ranges") {
    const std::string d1 = tmp_dir("cli_synth_1");
    const std::string d2 = tmp_dir("cli_synth_2");
    REQUIRE(run_cli("synth --out " + d1 + " --count 10 --size 48,48 --profile indoor --seed 3") == 0);
    REQUIRE(run_cli("synth --out " + d2 + " --count 10 --size 48,48 --profile indoor --seed 3") == 0);

    CHECK(count_pngs(d1 + "/train") == 16);  // 8 pairs
    CHECK(count_pngs(d1 + "/val") == 4);     // 2 pairs

    const auto params = read_lines(d1 + "/params.tsv");
    REQUIRE(params.size() == 11);  // header + 10 rows
    CHECK(params[0] == "seed\tbeta\tA");
    for (std::size_t i = 1; i < params.size(); ++i) {
        std::istringstream row(params[i]);
        std::uint64_t seed;
        double beta, a;
        row >> seed >> beta >> a;
        CHECK(beta > 0.6);
        CHECK(beta < 1.8);
        CHECK(a >= 0.7);
        CHECK(a <= 1.0);
    }
    CHECK(dirs_byte_identical(d1, d2));
    CHECK(run_cli("synth --out " + d1 + " --count 5 --size 3,3") != 0);
    fs::remove_all(d2);

    SUBCASE("eval: pred=gt hits the caps and MEAN row is the mean") {
        const std::string ev = tmp_dir("cli_eval");
        REQUIRE(run_cli("eval --pred " + d1 + "/train --gt " + d1 + "/train --out " + ev) == 0);
        const auto lines = read_lines(ev + "/eval.tsv");
        REQUIRE(lines.size() == 18);  // header + 16 images + MEAN
        CHECK(lines[0] == "image\tpsnr_db\tssim");
        double sum_psnr = 0.0, sum_ssim = 0.0;
        for (std::size_t i = 1; i + 1 < lines.size(); ++i) {
            std::istringstream row(lines[i]);
            std::string name;
            double p, s;
            row >> name >> p >> s;
            CHECK(p == doctest::Approx(100.0));
            CHECK(s == doctest::Approx(1.0));
            sum_psnr += p;
            sum_ssim += s;
        }
        std::istringstream mean_row(lines.back());
        std::string tag;
        double mp, ms;
        mean_row >> tag >> mp >> ms;
        CHECK(tag == "MEAN");
        CHECK(mp == doctest::Approx(sum_psnr / 16).epsilon(1e-6));
        CHECK(ms == doctest::Approx(sum_ssim / 16).epsilon(1e-6));
        // Missing counterpart rejected.
        CHECK(run_cli("eval --pred " + d1 + "/train --gt " + ev + " --out " + ev) != 0);
        fs::remove_all(ev);
    }

    SUBCASE("train: short CLI run writes log, checkpoints, manifest") {
        const std::string r1 = tmp_dir("cli_run_1");
        const std::string r2 = tmp_dir("cli_run_2");
        const std::string flags =
            " --scheme soft --preset desk --seed 5 --epochs 2 --data " + d1;
        REQUIRE(run_cli("train" + flags + " --out " + r1) == 0);
        REQUIRE(run_cli("train" + flags + " --out " + r2) == 0);
        CHECK(read_lines(r1 + "/log.tsv").size() == 3);  // header + 2 epochs
        CHECK(fs::exists(r1 + "/final.ckpt"));
        CHECK(fs::exists(r1 + "/best.ckpt"));
        CHECK(fs::exists(r1 + "/manifest.tsv"));
        CHECK(file_bytes(r1 + "/final.ckpt") == file_bytes(r2 + "/final.ckpt"));
        CHECK(run_cli("train --data " + d1 + "/no_such --scheme soft --out " + r2) != 0);
        fs::remove_all(r2);

        SUBCASE("config file loses to explicit flags") {
            const std::string cfg_path = r1 + "/train.cfg";
            std::ofstream(cfg_path) << "epochs=1\nseed=5\nscheme=soft\n";
            const std::string r3 = tmp_dir("cli_run_3");
            REQUIRE(run_cli("train --data " + d1 + " --preset desk --config " + cfg_path +
                            " --out " + r3) == 0);
            CHECK(read_lines(r3 + "/log.tsv").size() == 2);  // config epochs=1
            const std::string r4 = tmp_dir("cli_run_4");
            REQUIRE(run_cli("train --data " + d1 + " --preset desk --config " + cfg_path +
                            " --epochs 2 --out " + r4) == 0);
            CHECK(read_lines(r4 + "/log.tsv").size() == 3);  // flag wins
            fs::remove_all(r3);
            fs::remove_all(r4);
        }
        fs::remove_all(r1);
    }
    fs::remove_all(d1);
}

TEST_CASE("dehaze: dcp baseline, zero-weight identity, odd sizes") {
    const std::string dir = tmp_dir("cli_dehaze");
    // A clear synthetic image: dcp should approximately preserve it.
    const std::string ds = tmp_dir("cli_dehaze_ds");
    REQUIRE(run_cli("synth --out " + ds + " --count 5 --size 48,48 --profile indoor --seed 1") == 0);
    std::string clear_png;
    for (const auto& e : fs::directory_iterator(ds + "/train"))
        if (e.path().string().find("_clear") != std::string::npos) {
            clear_png = e.path().string();
            break;
        }
    REQUIRE(!clear_png.empty());
    REQUIRE(run_cli("dehaze --in " + clear_png + " --out " + dir + "/dcp.png --method dcp") == 0);
    Tensor orig = read_png(clear_png);
    Tensor dcp_out = read_png(dir + "/dcp.png");
    double mad = 0.0;
    for (std::size_t i = 0; i < orig.data().size(); ++i)
        mad += std::fabs(orig.data()[i] - dcp_out.data()[i]);
    mad /= double(orig.data().size());
    CHECK(mad < 0.1);

    // Zero-weight model: the global residual path makes dehaze the identity
    // up to 8-bit quantization.
    auto model = build_network(NetworkConfig::from_preset(DepthPreset::desk, HandoffMode::feature), 0);
    for (auto& [name, t] : model.params)
        std::fill(t.data().begin(), t.data().end(), 0.0f);
    AdamState adam;
    save_checkpoint(dir + "/zero.ckpt", model, adam, 0, "");
    const std::string hazy_png = clear_png.substr(0, clear_png.size() - 10) + "_hazy.png";
    REQUIRE(run_cli("dehaze --in " + hazy_png + " --out " + dir + "/idsout.png --method ids"
                    " --ckpt " + dir + "/zero.ckpt --preset desk --scheme soft") == 0);
    CHECK(file_bytes(dir + "/idsout.png") == file_bytes(hazy_png));

    // Non-divisible 50x50 input comes back exactly 50x50.
    Tensor big = read_png(hazy_png);
    Tensor odd = Tensor::zeros(Shape{1, 3, 50, 50});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 50; ++y)
            for (int x = 0; x < 50; ++x)
                odd.at(0, c, y, x) = big.at(0, c, y % 48, x % 48);
    write_png(dir + "/odd.png", odd);
    REQUIRE(run_cli("dehaze --in " + dir + "/odd.png --out " + dir + "/odd_out.png --method ids"
                    " --ckpt " + dir + "/zero.ckpt") == 0);
    Tensor odd_out = read_png(dir + "/odd_out.png");
    CHECK(odd_out.shape() == Shape{1, 3, 50, 50});
    CHECK(odd_out.data() == odd.data());  // zero-weight identity survives pad/crop

    // Directory mode processes every PNG.
    REQUIRE(run_cli("dehaze --in " + ds + "/val --out " + dir + "/batch --method dcp") == 0);
    CHECK(count_pngs(dir + "/batch") == count_pngs(ds + "/val"));

    CHECK(run_cli("dehaze --in " + hazy_png + " --out " + dir + "/x.png --method ids") != 0);
    CHECK(run_cli("dehaze --in " + dir + "/no_such.png --out " + dir + "/y.png --method dcp") != 0);
    fs::remove_all(dir);
    fs::remove_all(ds);
}

TEST_CASE("gradcheck command reports per-op rows and exits clean") {
    const std::string out = (fs::temp_directory_path() / "cli_gradcheck.txt").string();
    const std::string cmd = g_cli + " gradcheck > " + out + " 2>&1";
    REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    const auto lines = read_lines(out);
    int pass_rows = 0;
    for (const auto& l : lines)
        if (l.find(" pass") != std::string::npos) ++pass_rows;
    CHECK(pass_rows >= 15);  // one row per checked op
    fs::remove(out);
}

int main(int argc, char** argv) {
    doctest::Context ctx;
    std::vector<char*> args;
    for (int i = 0; i < argc; ++i) {
        if (i == 1 && argv[i][0] != '-') {
            g_cli = argv[i];
            continue;
        }
        args.push_back(argv[i]);
    }
    if (g_cli.empty()) {
        const char* env = std::getenv("IDS_CLI_BIN");
        if (env) g_cli = env;
    }
    if (g_cli.empty()) {
        std::fprintf(stderr, "usage: test_cli <path-to-ids-binary> [doctest args]\n");
        return 2;
    }
    ctx.applyCommandLine(int(args.size()), args.data());
    return ctx.run();
}
