#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <png.h>

#include "irlsrec/rng.hpp"
#include "irlsrec/tensor_io.hpp"
#include "oracles.hpp"

using namespace irlsrec;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    const fs::path dir = fs::temp_directory_path() / "irlsrec_io_tests";
    fs::create_directories(dir);
    return dir;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("ltsr scalar round-trip") {
    const fs::path path = temp_dir() / "scalar.ltsr";
    write_tensor(Tensor::scalar(3.5), path);
    CHECK(fs::file_size(path) == 16);  // magic + rank + f64 payload
    const Tensor back = read_tensor(path);
    CHECK(back.rank() == 0);
    CHECK(back[0] == 3.5);
}

TEST_CASE("ltsr identity round-trip") {
    const fs::path path = temp_dir() / "id.ltsr";
    Tensor t({2, 2}, {1.0, 0.0, 0.0, 1.0});
    write_tensor(t, path);
    const Tensor back = read_tensor(path);
    CHECK(back.shape() == t.shape());
    for (std::size_t i = 0; i < 4; ++i) CHECK(back[i] == t[i]);
}

TEST_CASE("ltsr writes are deterministic and round-trips bit-exact") {
    Rng rng(42);
    Tensor t({3, 5, 5});
    for (auto& v : t.values()) v = rng.normal();
    const fs::path p1 = temp_dir() / "k1.ltsr", p2 = temp_dir() / "k2.ltsr";
    write_tensor(t, p1);
    write_tensor(t, p2);
    CHECK(slurp(p1) == slurp(p2));
    const Tensor back = read_tensor(p1);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);
}

TEST_CASE("ltsr error paths") {
    const fs::path dir = temp_dir();
    {
        std::ofstream os(dir / "badmagic.ltsr", std::ios::binary);
        os << "NOPE" << std::string(12, '\0');
    }
    CHECK_THROWS_AS(read_tensor(dir / "badmagic.ltsr"), IoError);

    {
        const fs::path p = dir / "trunc.ltsr";
        write_tensor(Tensor({2, 3}, std::vector<double>(6, 1.0)), p);
        fs::resize_file(p, fs::file_size(p) - 8);
        CHECK_THROWS_AS(read_tensor(p), IoError);
    }
    {
        // huge extent in the header
        std::ofstream os(dir / "huge.ltsr", std::ios::binary);
        os << "LTSR";
        const std::uint32_t rank = 2;
        os.write(reinterpret_cast<const char*>(&rank), 4);
        const std::uint64_t e = std::uint64_t{1} << 62;
        os.write(reinterpret_cast<const char*>(&e), 8);
        os.write(reinterpret_cast<const char*>(&e), 8);
    }
    CHECK_THROWS_AS(read_tensor(dir / "huge.ltsr"), IoError);
    {
        const fs::path p = dir / "nan.ltsr";
        Tensor t({2}, {1.0, std::nan("")});
        std::ofstream os(p, std::ios::binary);
        os << "LTSR";
        const std::uint32_t rank = 1;
        const std::uint64_t e = 2;
        os.write(reinterpret_cast<const char*>(&rank), 4);
        os.write(reinterpret_cast<const char*>(&e), 8);
        os.write(reinterpret_cast<const char*>(t.data()), 16);
        os.close();
        CHECK_THROWS_AS(read_tensor(p), IoError);
    }
    CHECK_THROWS_AS(read_tensor(dir / "does_not_exist.ltsr"), IoError);
}

TEST_CASE("png 8-bit range endpoints and quantization rule") {
    const fs::path p = temp_dir() / "endpoints.png";
    Tensor t({1, 2, 2}, {0.0, 1.0, 0.5, 0.25});
    write_image(t, p, ImageMeta{8, 1});
    const Tensor back = read_image(p);
    CHECK(back.at3(0, 0, 0) == 0.0);
    CHECK(back.at3(0, 0, 1) == 1.0);
    // 0.5 * 255 = 127.5 rounds half away from zero to 128
    CHECK(back.at3(0, 1, 0) == doctest::Approx(128.0 / 255.0).epsilon(1e-15));
    CHECK(quantize_unit(0.5, 255.0) == 128);
}

TEST_CASE("png round-trip equals quantized tensor exactly") {
    Rng rng(7);
    const fs::path p = temp_dir() / "roundtrip.png";
    for (const int depth : {8, 16}) {
        for (const std::size_t channels : {std::size_t{1}, std::size_t{3}}) {
            Tensor t({channels, 9, 7});
            for (auto& v : t.values()) v = rng.uniform();
            write_image(t, p, ImageMeta{depth, channels});
            const Tensor back = read_image(p);
            const double maxval = depth == 8 ? 255.0 : 65535.0;
            for (std::size_t i = 0; i < t.size(); ++i)
                CHECK(back[i] == static_cast<double>(quantize_unit(t[i], maxval)) / maxval);
        }
    }
}

TEST_CASE("16-bit decode agrees with an independent png decoder") {
    const fs::path p = temp_dir() / "cross16.png";
    Rng rng(99);
    Tensor t({1, 8, 8});
    for (auto& v : t.values()) v = rng.uniform();
    t.at3(0, 3, 4) = 32768.0 / 65535.0;  // a known mid-range code
    write_image(t, p, ImageMeta{16, 1});

    const Tensor ours = read_image(p);
    const oracles::MiniPng theirs = oracles::decode_png(p.string());
    REQUIRE(theirs.bit_depth == 16);
    CHECK(ours.at3(0, 3, 4) == 32768.0 / 65535.0);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x)
            CHECK(ours.at3(0, y, x) == doctest::Approx(theirs.at(0, y, x)).epsilon(1e-15));
}

TEST_CASE("unsupported png color type is rejected") {
    // produce an RGBA file with libpng directly
    const fs::path p = temp_dir() / "rgba.png";
    std::FILE* fp = std::fopen(p.string().c_str(), "wb");
    REQUIRE(fp);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    REQUIRE(setjmp(png_jmpbuf(png)) == 0);
    png_init_io(png, fp);
    png_set_IHDR(png, info, 2, 2, 8, PNG_COLOR_TYPE_RGBA, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const png_byte row[8] = {1, 2, 3, 4, 5, 6, 7, 8};
    png_write_row(png, row);
    png_write_row(png, row);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);

    CHECK_THROWS_AS(read_image(p), IoError);
    CHECK_THROWS_AS(read_image(temp_dir() / "missing.png"), IoError);
}

TEST_CASE("all-zero tensor writes an all-black image") {
    const fs::path p = temp_dir() / "black.png";
    write_image(Tensor({1, 4, 4}), p, ImageMeta{8, 1});
    const Tensor back = read_image(p);
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == 0.0);
}
