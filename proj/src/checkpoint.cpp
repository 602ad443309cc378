// SPDX-License-Identifier: Apache-2.0
#include "moecl/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "binary_io.hpp"

namespace moecl {

void Container::put(std::string name, Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) {
        throw Error(ErrorKind::Dimension, "Container::put: " + name + " shape does not match value count");
    }
    if (contains(name)) throw Error(ErrorKind::Duplicate, "Container::put: duplicate entry " + name);
    entries_.push_back({std::move(name), std::move(shape), std::move(values)});
}

void Container::put(std::string name, const Tensor& tensor) {
    put(std::move(name), tensor.shape(), std::vector<double>(tensor.data().begin(), tensor.data().end()));
}

bool Container::contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
}

const ContainerEntry& Container::get(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return e;
    }
    throw Error(ErrorKind::Format, "checkpoint has no entry named " + name);
}

Tensor Container::tensor(const std::string& name, bool requires_grad) const {
    const auto& e = get(name);
    return Tensor::from(e.shape, e.values, requires_grad);
}

void Container::load_into(const std::string& name, Tensor& target) const {
    const auto& e = get(name);
    if (e.shape != target.shape()) {
        throw Error(ErrorKind::Dimension, "checkpoint entry " + name + " has shape " + shape_string(e.shape) +
                                              ", expected " + shape_string(target.shape()));
    }
    std::copy(e.values.begin(), e.values.end(), target.mutable_data().begin());
}

std::vector<std::string> Container::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
        if (e.name.starts_with(prefix)) out.push_back(e.name);
    }
    return out;
}

void Container::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
    out.write("MCLB1", 5);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (std::size_t d : e.shape) io::write_le<std::uint64_t>(out, d);
        for (double v : e.values) io::write_le<double>(out, v);
    }
    if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

Container Container::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open checkpoint " + path.string());
    const std::string what = "checkpoint " + path.string();
    io::expect_magic(in, "MCLB1", what);
    Container c;
    const auto count = io::read_le<std::uint32_t>(in, what);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = io::read_le<std::uint32_t>(in, what);
        if (len > 4096) throw Error(ErrorKind::Format, what + ": implausible name length");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw Error(ErrorKind::Format, what + ": truncated payload");
        const auto rank = io::read_le<std::uint32_t>(in, what);
        if (rank > 8) throw Error(ErrorKind::Format, what + ": implausible rank");
        Shape shape(rank);
        for (auto& d : shape) d = io::read_le<std::uint64_t>(in, what);
        const std::size_t n = shape_numel(shape);
        if (n > (std::size_t{1} << 32)) throw Error(ErrorKind::Format, what + ": implausible entry size");
        std::vector<double> values(n);
        for (double& v : values) v = io::read_le<double>(in, what);
        c.put(std::move(name), std::move(shape), std::move(values));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::Format, what + ": trailing bytes");
    return c;
}

std::uint64_t hash_values(std::span<const double> values, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (double v : values) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char b : bytes) h = (h ^ b) * 0x100000001b3ULL;
    }
    return h;
}

}  // namespace moecl
