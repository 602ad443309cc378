#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "moecl/checkpoint.hpp"
#include "moecl/error.hpp"

using namespace moecl;
namespace fs = std::filesystem;

TEST_CASE("container round trip") {
    const fs::path path = fs::temp_directory_path() / "moecl_test_checkpoint.mclb";
    Container c;
    c.put("a/x", {2, 3}, {1, 2, 3, 4, 5, 6});
    c.put("a/y", Tensor::scalar(-1.5));
    c.put("b", {0}, {});
    c.save(path);
    const Container d = Container::load(path);
    CHECK(d == c);
    CHECK(d.names_with_prefix("a/") == std::vector<std::string>{"a/x", "a/y"});
    CHECK(d.tensor("a/x").shape() == Shape{2, 3});

    Tensor target = Tensor::zeros({2, 3});
    d.load_into("a/x", target);
    CHECK(target.at(1, 2) == 6.0);
    Tensor wrong = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(d.load_into("a/x", wrong), Error);
    CHECK_THROWS_AS(d.get("missing"), Error);
    CHECK_THROWS_AS(c.put("a/x", {1}, {0}), Error);
    CHECK_THROWS_AS(c.put("bad", {2}, {1.0}), Error);
}

TEST_CASE("container rejects corrupt files") {
    const fs::path path = fs::temp_directory_path() / "moecl_test_checkpoint_bad.mclb";
    Container c;
    c.put("w", {4}, {1, 2, 3, 4});
    c.save(path);

    fs::resize_file(path, fs::file_size(path) - 3);
    CHECK_THROWS_AS(Container::load(path), Error);

    c.save(path);
    {
        std::ofstream out(path, std::ios::app | std::ios::binary);
        out.put('x');
    }
    CHECK_THROWS_AS(Container::load(path), Error);

    c.save(path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("MCLD1", 5);
    }
    CHECK_THROWS_AS(Container::load(path), Error);
}

TEST_CASE("hash_values") {
    const std::vector<double> a{1.0, 2.0};
    const std::vector<double> b{1.0, 2.0000000000000004};
    CHECK(hash_values(a) == hash_values(a));
    CHECK(hash_values(a) != hash_values(b));
    CHECK(hash_values({}) == 0xcbf29ce484222325ULL);
}
