#include "dseg/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dseg/error.hpp"

namespace dseg {

namespace {

constexpr char kMagic[8] = {'D', 'S', 'E', 'G', 'B', 'I', 'N', '1'};

using nlohmann::json;

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(const std::string& bytes, std::size_t pos) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    return v;
}

json linear_meta(const LinearMap& m) {
    return json{{"in", m.in_dim()}, {"out", m.out_dim()}};
}

NamedTensor matrix_tensor(const std::string& name, const Matrix& m) {
    return {name,
            {static_cast<std::uint64_t>(m.rows), static_cast<std::uint64_t>(m.cols)},
            m.a};
}

NamedTensor vector_tensor(const std::string& name, const std::vector<double>& v) {
    return {name, {v.size()}, v};
}

NamedTensor conv_weight_tensor(const std::string& name, const Tensor4& w) {
    return {name,
            {static_cast<std::uint64_t>(w.n), static_cast<std::uint64_t>(w.c),
             static_cast<std::uint64_t>(w.h), static_cast<std::uint64_t>(w.w)},
            w.data};
}

// Lookup helper: containers are small, linear scan is fine.
const NamedTensor& find_tensor(const Container& box, const std::string& name) {
    for (const NamedTensor& t : box.tensors)
        if (t.name == name) return t;
    throw DataError("container: missing tensor '" + name + "'");
}

Matrix to_matrix(const NamedTensor& t) {
    if (t.dims.size() != 2)
        throw DataError("container: tensor '" + t.name + "' is not a matrix");
    Matrix m(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]));
    m.a = t.values;
    return m;
}

Tensor4 to_tensor4(const NamedTensor& t) {
    if (t.dims.size() != 4)
        throw DataError("container: tensor '" + t.name + "' is not 4-axis");
    Tensor4 out(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]),
                static_cast<int>(t.dims[2]), static_cast<int>(t.dims[3]));
    out.data = t.values;
    return out;
}

LinearMap to_linear(const Container& box, const std::string& stem) {
    LinearMap m;
    m.weight = to_matrix(find_tensor(box, stem + ".weight"));
    m.bias = find_tensor(box, stem + ".bias").values;
    if (static_cast<int>(m.bias.size()) != m.weight.rows)
        throw DataError("container: '" + stem + "' bias does not match its weight");
    return m;
}

json parse_meta(const Container& box, const std::string& path) {
    json meta = json::parse(box.meta_json, nullptr, false);
    if (meta.is_discarded() || !meta.is_object())
        throw DataError("container: '" + path + "' has a malformed metadata object");
    return meta;
}

}  // namespace

void write_container(const Container& box, const std::string& path) {
    json header;
    header["kind"] = box.kind;
    header["meta"] = json::parse(box.meta_json.empty() ? "{}" : box.meta_json);
    json tensor_list = json::array();
    for (const NamedTensor& t : box.tensors) {
        std::uint64_t count = 1;
        for (std::uint64_t d : t.dims) count *= d;
        if (count != t.values.size())
            throw ArgumentError("container: tensor '" + t.name +
                                "' dims do not match its value count");
        tensor_list.push_back(json{{"name", t.name}, {"dims", t.dims}});
    }
    header["tensors"] = tensor_list;
    const std::string header_text = header.dump();  // object keys are sorted

    std::string bytes(kMagic, sizeof(kMagic));
    append_u64(bytes, header_text.size());
    bytes += header_text;
    for (const NamedTensor& t : box.tensors) {
        const std::size_t start = bytes.size();
        bytes.resize(start + t.values.size() * sizeof(double));
        std::memcpy(bytes.data() + start, t.values.data(), t.values.size() * sizeof(double));
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw DataError("failed writing '" + path + "'");
}

Container read_container(const std::string& path) {
    const std::string bytes = read_all(path);
    if (bytes.size() < sizeof(kMagic) + 8 ||
        std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw ParseError("'" + path + "': not a model container", 0);
    const std::uint64_t header_len = read_u64(bytes, sizeof(kMagic));
    const std::size_t header_start = sizeof(kMagic) + 8;
    if (header_start + header_len > bytes.size())
        throw ParseError("'" + path + "': header length exceeds the file", sizeof(kMagic));

    json header = json::parse(bytes.substr(header_start, header_len), nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw ParseError("'" + path + "': malformed JSON header", header_start);

    Container box;
    try {
        box.kind = header.at("kind").get<std::string>();
        box.meta_json = header.at("meta").dump();
        std::size_t pos = header_start + header_len;
        for (const json& entry : header.at("tensors")) {
            NamedTensor t;
            t.name = entry.at("name").get<std::string>();
            t.dims = entry.at("dims").get<std::vector<std::uint64_t>>();
            std::uint64_t count = 1;
            for (std::uint64_t d : t.dims) count *= d;
            if (pos + count * sizeof(double) > bytes.size())
                throw ParseError("'" + path + "': payload truncated in tensor '" + t.name + "'",
                                 bytes.size());
            t.values.resize(count);
            std::memcpy(t.values.data(), bytes.data() + pos, count * sizeof(double));
            pos += count * sizeof(double);
            box.tensors.push_back(std::move(t));
        }
        if (pos != bytes.size())
            throw ParseError("'" + path + "': trailing bytes after payload", pos);
    } catch (const json::exception& e) {
        throw ParseError("'" + path + "': bad header field (" + e.what() + ")", header_start);
    }
    return box;
}

void save_encoder(const PlantedEncoder& enc, const std::string& path) {
    enc.head.validate();
    using nlohmann::json;
    json layers = json::array();
    Container box;
    box.kind = "encoder";
    for (std::size_t i = 0; i < enc.backbone.layers.size(); ++i) {
        const ConvParams& conv = enc.backbone.layers[i];
        layers.push_back(json{{"stride", conv.stride},
                              {"dilation", conv.dilation},
                              {"padding", conv.padding}});
        const std::string stem = "backbone." + std::to_string(i);
        box.tensors.push_back(conv_weight_tensor(stem + ".weight", conv.weight));
        box.tensors.push_back(vector_tensor(stem + ".bias", conv.bias));
    }
    json meta;
    meta["layers"] = layers;
    meta["scale"] = enc.head.scale;
    box.meta_json = meta.dump();
    for (const auto& [stem, lin] :
         {std::pair<const char*, const LinearMap*>{"head.q", &enc.head.emb_q},
          {"head.k", &enc.head.emb_k},
          {"head.v", &enc.head.emb_v},
          {"head.f", &enc.head.final_linear}}) {
        box.tensors.push_back(matrix_tensor(std::string(stem) + ".weight", lin->weight));
        box.tensors.push_back(vector_tensor(std::string(stem) + ".bias", lin->bias));
    }
    write_container(box, path);
}

PlantedEncoder load_encoder(const std::string& path) {
    Container box = read_container(path);
    if (box.kind != "encoder")
        throw DataError("'" + path + "': expected an encoder container, found kind '" +
                        box.kind + "'");
    json meta = parse_meta(box, path);
    PlantedEncoder enc;
    try {
        const json& layers = meta.at("layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            ConvParams conv;
            conv.stride = layers[i].at("stride").get<int>();
            conv.dilation = layers[i].at("dilation").get<int>();
            conv.padding = layers[i].at("padding").get<int>();
            const std::string stem = "backbone." + std::to_string(i);
            conv.weight = to_tensor4(find_tensor(box, stem + ".weight"));
            conv.bias = find_tensor(box, stem + ".bias").values;
            conv.validate();
            enc.backbone.layers.push_back(std::move(conv));
        }
        enc.head.scale = meta.at("scale").get<double>();
    } catch (const json::exception& e) {
        throw DataError("'" + path + "': bad encoder metadata (" + std::string(e.what()) + ")");
    }
    enc.head.emb_q = to_linear(box, "head.q");
    enc.head.emb_k = to_linear(box, "head.k");
    enc.head.emb_v = to_linear(box, "head.v");
    enc.head.final_linear = to_linear(box, "head.f");
    enc.head.validate();
    if (enc.backbone.layers.empty())
        throw DataError("'" + path + "': encoder has no backbone layers");
    if (enc.backbone.out_channels() != enc.head.d_in())
        throw DataError("'" + path + "': backbone output does not feed the head");
    return enc;
}

void save_bank(const ClassifierBank& bank, const std::string& path) {
    if (bank.rows() < 1) throw ArgumentError("bank: nothing to save");
    json meta;
    meta["names"] = bank.names;
    meta["has_background"] = bank.has_background;
    Container box;
    box.kind = "bank";
    box.meta_json = meta.dump();
    box.tensors.push_back(matrix_tensor("embeddings", bank.embeddings));
    write_container(box, path);
}

ClassifierBank load_bank(const std::string& path) {
    Container box = read_container(path);
    if (box.kind != "bank")
        throw DataError("'" + path + "': expected a bank container, found kind '" +
                        box.kind + "'");
    json meta = parse_meta(box, path);
    ClassifierBank bank;
    try {
        bank.names = meta.at("names").get<std::vector<std::string>>();
        bank.has_background = meta.at("has_background").get<bool>();
    } catch (const json::exception& e) {
        throw DataError("'" + path + "': bad bank metadata (" + std::string(e.what()) + ")");
    }
    bank.embeddings = to_matrix(find_tensor(box, "embeddings"));
    const int expected =
        static_cast<int>(bank.names.size()) + (bank.has_background ? 1 : 0);
    if (bank.embeddings.rows != expected)
        throw DataError("'" + path + "': bank rows do not match its class names");
    return bank;
}

}  // namespace dseg
