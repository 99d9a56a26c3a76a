#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dseg/encoder.hpp"
#include "dseg/tensor.hpp"
#include "dseg/textbank.hpp"

namespace dseg {

// Flat binary container shared by encoder files, bank files and training
// snapshots: an 8-byte magic, a little-endian u64 header length, a JSON
// header (kind, metadata, tensor names and dims in payload order), then the
// concatenated float64 payload. Writing the same object twice produces
// byte-identical files.
struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> dims;  // product == values.size()
    std::vector<double> values;
};

struct Container {
    std::string kind;       // "encoder", "bank" or "target"
    std::string meta_json;  // kind-specific metadata, serialized JSON object
    std::vector<NamedTensor> tensors;
};

void write_container(const Container& box, const std::string& path);
// Malformed files raise ParseError carrying the byte offset.
Container read_container(const std::string& path);

void save_encoder(const PlantedEncoder& enc, const std::string& path);
PlantedEncoder load_encoder(const std::string& path);

void save_bank(const ClassifierBank& bank, const std::string& path);
ClassifierBank load_bank(const std::string& path);

}  // namespace dseg
