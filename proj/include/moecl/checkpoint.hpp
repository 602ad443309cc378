// SPDX-License-Identifier: Apache-2.0
//
// MCLB1 container: "MCLB1", u32 entry count, then per entry u32 name length,
// name bytes, u32 rank, u64 dims[rank] and f64 values, all little-endian.
// Backbone, adapter and autoencoder state share one file under distinct name
// prefixes.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "moecl/tensor.hpp"

namespace moecl {

struct ContainerEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;

    bool operator==(const ContainerEntry&) const = default;
};

class Container {
   public:
    void put(std::string name, Shape shape, std::vector<double> values);
    void put(std::string name, const Tensor& tensor);
    bool contains(const std::string& name) const;
    const ContainerEntry& get(const std::string& name) const;
    Tensor tensor(const std::string& name, bool requires_grad = false) const;
    /// Copies a stored entry into an existing tensor of the same shape.
    void load_into(const std::string& name, Tensor& target) const;
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;
    const std::vector<ContainerEntry>& entries() const noexcept { return entries_; }

    void save(const std::filesystem::path& path) const;
    static Container load(const std::filesystem::path& path);

    bool operator==(const Container&) const = default;

   private:
    std::vector<ContainerEntry> entries_;
};

/// FNV-1a over the raw bytes of a value array.
std::uint64_t hash_values(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace moecl
