#include "dseg/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dseg/error.hpp"
#include "dseg/rng.hpp"

namespace fs = std::filesystem;

namespace dseg {

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw DataError("failed writing '" + path + "'");
}

bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

struct PnmHeader {
    int w = 0, h = 0;
    std::size_t payload = 0;  // byte offset where pixel data begins
};

// Header: magic, three whitespace-delimited decimal fields (width, height,
// maxval 255), exactly one whitespace byte, then raw pixel bytes.
PnmHeader parse_pnm_header(const std::string& bytes, const std::string& magic,
                           const std::string& path) {
    std::size_t pos = 0;
    if (bytes.size() < magic.size() || bytes.compare(0, magic.size(), magic) != 0)
        throw ParseError("'" + path + "': expected magic '" + magic + "'", 0);
    pos = magic.size();

    long fields[3];
    for (int f = 0; f < 3; ++f) {
        if (pos >= bytes.size() || !is_space(bytes[pos]))
            throw ParseError("'" + path + "': expected whitespace before header field", pos);
        while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (pos == start)
            throw ParseError("'" + path + "': expected decimal header field", start);
        if (pos - start > 9)
            throw ParseError("'" + path + "': header field too large", start);
        fields[f] = std::stol(bytes.substr(start, pos - start));
    }
    if (fields[0] < 1 || fields[1] < 1)
        throw ParseError("'" + path + "': dimensions must be positive", magic.size());
    if (fields[2] != 255)
        throw ParseError("'" + path + "': maxval must be 255", magic.size());
    if (pos >= bytes.size() || !is_space(bytes[pos]))
        throw ParseError("'" + path + "': expected single whitespace before pixel data", pos);
    ++pos;

    PnmHeader hdr;
    hdr.w = static_cast<int>(fields[0]);
    hdr.h = static_cast<int>(fields[1]);
    hdr.payload = pos;
    return hdr;
}

void check_payload_size(const std::string& bytes, const PnmHeader& hdr,
                        std::size_t need, const std::string& path) {
    const std::size_t have = bytes.size() - hdr.payload;
    if (have < need)
        throw ParseError("'" + path + "': pixel data truncated, need " + std::to_string(need) +
                             " bytes but only " + std::to_string(have) + " present",
                         bytes.size());
    if (have > need)
        throw ParseError("'" + path + "': trailing bytes after pixel data",
                         hdr.payload + need);
}

std::string manifest_escape_check(const std::string& name) {
    if (name.empty()) throw ConfigError("manifest: class name must not be empty");
    if (name.front() == ' ' || name.back() == ' ')
        throw ConfigError("manifest: class name '" + name + "' has leading or trailing space");
    for (char c : name)
        if (c == '\n' || c == '\r' || c == '\t')
            throw ConfigError("manifest: class name '" + name + "' contains control characters");
    return name;
}

double color_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double acc = 0.0;
    for (int i = 0; i < 3; ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc);
}

// One rendered scene: flat background, then objects painted in draw order so
// later shapes occlude earlier ones; the label map tracks the visible surface.
void render_scene(const SceneSpec& spec, Rng& rng, Tensor4& img, LabelMap& lab) {
    img = Tensor4(1, 3, spec.height, spec.width);
    lab = LabelMap(1, spec.height, spec.width);
    const SceneClass& bg = spec.classes[spec.background_class];
    for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
            for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = bg.color[c];
            lab.at(0, y, x) = static_cast<std::uint8_t>(bg.id);
        }

    std::vector<int> object_classes;
    for (const SceneClass& cls : spec.classes)
        if (cls.id != spec.background_class) object_classes.push_back(cls.id);

    const int count = rng.range(spec.min_objects, spec.max_objects);
    for (int obj = 0; obj < count; ++obj) {
        const SceneClass& cls =
            spec.classes[object_classes[rng.below(object_classes.size())]];
        int sw, sh;
        if (cls.family == ShapeFamily::Rectangle) {
            sw = rng.range(spec.min_object_size, spec.max_object_size);
            sh = rng.range(spec.min_object_size, spec.max_object_size);
        } else {
            sw = sh = rng.range(spec.min_object_size, spec.max_object_size);
        }
        const int x0 = rng.range(spec.margin, spec.width - spec.margin - sw);
        const int y0 = rng.range(spec.margin, spec.height - spec.margin - sh);
        std::array<double, 3> color;
        for (int c = 0; c < 3; ++c)
            color[c] = clamp01(cls.color[c] + rng.uniform(-spec.color_jitter, spec.color_jitter));

        auto paint = [&](int y, int x) {
            for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = color[c];
            lab.at(0, y, x) = static_cast<std::uint8_t>(cls.id);
        };
        if (cls.family == ShapeFamily::Rectangle) {
            for (int y = y0; y < y0 + sh; ++y)
                for (int x = x0; x < x0 + sw; ++x) paint(y, x);
        } else if (cls.family == ShapeFamily::Circle) {
            const double cy = y0 + (sh - 1) / 2.0;
            const double cx = x0 + (sw - 1) / 2.0;
            const double r2 = (sh - 1) / 2.0 * ((sh - 1) / 2.0) + 1e-9;
            for (int y = y0; y < y0 + sh; ++y)
                for (int x = x0; x < x0 + sw; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r2) paint(y, x);
        } else {  // triangle: apex on the top row, full-width base on the bottom
            const double cx = x0 + (sw - 1) / 2.0;
            for (int y = y0; y < y0 + sh; ++y) {
                const double t = sh > 1 ? static_cast<double>(y - y0) / (sh - 1) : 1.0;
                const double half = t * (sw - 1) / 2.0;
                const int lo = static_cast<int>(std::lround(cx - half));
                const int hi = static_cast<int>(std::lround(cx + half));
                for (int x = lo; x <= hi; ++x) paint(y, x);
            }
        }
    }

    // Boundary ignore band: a pixel is dropped when any neighbour within the
    // configured Chebyshev radius carries a different label, so both sides of
    // every object contour are excluded, as real boundary annotations are.
    if (spec.ignore_border > 0) {
        const int b = spec.ignore_border;
        LabelMap marked = lab;
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x) {
                const std::uint8_t own = lab.at(0, y, x);
                bool boundary = false;
                for (int dy = -b; dy <= b && !boundary; ++dy)
                    for (int dx = -b; dx <= b && !boundary; ++dx) {
                        const int ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= spec.height || nx < 0 || nx >= spec.width) continue;
                        if (lab.at(0, ny, nx) != own) boundary = true;
                    }
                if (boundary) marked.at(0, y, x) = static_cast<std::uint8_t>(kIgnoreIndex);
            }
        lab = marked;
    }
}

}  // namespace

std::string shape_name(ShapeFamily family) {
    switch (family) {
        case ShapeFamily::Rectangle: return "rectangle";
        case ShapeFamily::Circle: return "circle";
        case ShapeFamily::Triangle: return "triangle";
    }
    throw ArgumentError("unknown shape family");
}

ShapeFamily shape_from_name(const std::string& name) {
    if (name == "rectangle") return ShapeFamily::Rectangle;
    if (name == "circle") return ShapeFamily::Circle;
    if (name == "triangle") return ShapeFamily::Triangle;
    throw ArgumentError("unknown shape family '" + name + "'");
}

void SceneSpec::validate() const {
    if (classes.empty()) throw ConfigError("scene: class table is empty");
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i].id != static_cast<int>(i))
            throw ConfigError("scene: class ids must be dense 0..K-1, slot " +
                              std::to_string(i) + " holds id " + std::to_string(classes[i].id));
        manifest_escape_check(classes[i].name);
        for (double v : classes[i].color)
            if (!(v >= 0.0 && v <= 1.0))
                throw ConfigError("scene: prototype colors must lie in [0,1]");
    }
    const int k = static_cast<int>(classes.size());
    if (k > kIgnoreIndex)
        throw ConfigError("scene: more classes than representable label values");
    for (int a = 0; a < k; ++a)
        for (int b = a + 1; b < k; ++b)
            if (color_distance(classes[a].color, classes[b].color) < min_color_distance)
                throw ConfigError("scene: prototype colors of classes " + std::to_string(a) +
                                  " and " + std::to_string(b) + " are closer than " +
                                  std::to_string(min_color_distance));
    if (background_class < 0 || background_class >= k)
        throw ConfigError("scene: background_class out of range");
    if (k < 2) throw ConfigError("scene: need at least one object class besides the background");
    if (min_objects < 1 || max_objects < min_objects)
        throw ConfigError("scene: need 1 <= min_objects <= max_objects");
    if (min_object_size < 1 || max_object_size < min_object_size)
        throw ConfigError("scene: need 1 <= min_object_size <= max_object_size");
    if (margin < 0 || ignore_border < 0)
        throw ConfigError("scene: margin and ignore_border must be non-negative");
    if (max_object_size + 2 * margin > std::min(height, width))
        throw ConfigError("scene: canvas too small for max_object_size plus margins");
    if (color_jitter < 0) throw ConfigError("scene: color_jitter must be non-negative");
    // Keeps every jittered color strictly nearest to its own prototype.
    if (color_jitter * 2.0 * std::sqrt(3.0) >= min_color_distance)
        throw ConfigError("scene: color_jitter too large for the prototype spacing");
}

SceneSpec benchmark_scene_spec() {
    SceneSpec spec;
    spec.classes = {
        {0, "backdrop", {0.10, 0.10, 0.12}, ShapeFamily::Rectangle, true},
        {1, "red square", {0.85, 0.20, 0.15}, ShapeFamily::Rectangle, true},
        {2, "green circle", {0.15, 0.80, 0.25}, ShapeFamily::Circle, true},
        {3, "blue triangle", {0.20, 0.35, 0.90}, ShapeFamily::Triangle, true},
        {4, "yellow circle", {0.95, 0.85, 0.10}, ShapeFamily::Circle, false},
        {5, "purple square", {0.70, 0.20, 0.85}, ShapeFamily::Rectangle, false},
    };
    // Boundary pixels are ambiguous for any finite receptive field; like the
    // void bands of standard segmentation benchmarks, a few pixels either side
    // of a class edge stay out of both losses and metrics. Three covers a
    // 5-wide receptive field plus the alignment drift of resizing unpadded
    // feature maps back to image resolution.
    spec.ignore_border = 3;
    return spec;
}

SplitSpec DatasetManifest::split() const {
    SplitSpec s;
    for (const ManifestClass& cls : classes)
        (cls.seen ? s.seen : s.unseen).push_back(cls.id);
    return s;
}

std::vector<std::string> DatasetManifest::class_names() const {
    std::vector<std::string> names;
    for (const ManifestClass& cls : classes) names.push_back(cls.name);
    return names;
}

Matrix DatasetManifest::prototypes() const {
    Matrix protos(static_cast<int>(classes.size()), 3);
    for (std::size_t i = 0; i < classes.size(); ++i)
        for (int c = 0; c < 3; ++c) protos.at(static_cast<int>(i), c) = classes[i].color[c];
    return protos;
}

void DatasetManifest::validate() const {
    if (version != 1)
        throw DataError("manifest: unsupported version " + std::to_string(version));
    if (classes.empty()) throw DataError("manifest: class table is empty");
    std::set<std::string> names;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i].id != static_cast<int>(i))
            throw DataError("manifest: class ids must be dense 0..K-1, slot " +
                            std::to_string(i) + " holds id " + std::to_string(classes[i].id));
        manifest_escape_check(classes[i].name);
        if (!names.insert(classes[i].name).second)
            throw DataError("manifest: duplicate class name '" + classes[i].name + "'");
        for (double v : classes[i].color)
            if (!(v >= 0.0 && v <= 1.0))
                throw DataError("manifest: class colors must lie in [0,1]");
    }
    if (ignore_index < 0 || ignore_index > 255 ||
        ignore_index < static_cast<int>(classes.size()))
        throw DataError("manifest: ignore_index must lie in [K,255]");
    split().validate(static_cast<int>(classes.size()));
    if (pairs.empty()) throw DataError("manifest: no image/label pairs");
    for (const auto& [image, label] : pairs) {
        if (image.empty() || label.empty())
            throw DataError("manifest: empty path in pair table");
        if (image.find(' ') != std::string::npos || label.find(' ') != std::string::npos)
            throw DataError("manifest: paths must not contain spaces");
    }
}

void write_image(const Tensor4& image, const std::string& path) {
    if (image.n != 1 || image.c != 3)
        throw ArgumentError("write_image: expected a single 3-channel image");
    for (double v : image.data)
        if (!(v >= 0.0 && v <= 1.0))
            throw ArgumentError("write_image: values must lie in [0,1]");
    std::string bytes = "P6\n" + std::to_string(image.w) + " " + std::to_string(image.h) +
                        "\n255\n";
    bytes.reserve(bytes.size() + image.data.size());
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const int q = static_cast<int>(std::lround(image.at(0, c, y, x) * 255.0));
                bytes.push_back(static_cast<char>(std::min(255, std::max(0, q))));
            }
    write_file_bytes(path, bytes);
}

Tensor4 read_image(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    const PnmHeader hdr = parse_pnm_header(bytes, "P6", path);
    const std::size_t need = static_cast<std::size_t>(hdr.w) * hdr.h * 3;
    check_payload_size(bytes, hdr, need, path);
    Tensor4 image(1, 3, hdr.h, hdr.w);
    std::size_t pos = hdr.payload;
    for (int y = 0; y < hdr.h; ++y)
        for (int x = 0; x < hdr.w; ++x)
            for (int c = 0; c < 3; ++c)
                image.at(0, c, y, x) =
                    static_cast<unsigned char>(bytes[pos++]) / 255.0;
    return image;
}

void write_labels(const LabelMap& labels, const std::string& path) {
    if (labels.n != 1) throw ArgumentError("write_labels: expected a single label map");
    std::string bytes = "P5\n" + std::to_string(labels.w) + " " + std::to_string(labels.h) +
                        "\n255\n";
    bytes.append(reinterpret_cast<const char*>(labels.ids.data()), labels.ids.size());
    write_file_bytes(path, bytes);
}

LabelMap read_labels(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    const PnmHeader hdr = parse_pnm_header(bytes, "P5", path);
    const std::size_t need = static_cast<std::size_t>(hdr.w) * hdr.h;
    check_payload_size(bytes, hdr, need, path);
    LabelMap labels(1, hdr.h, hdr.w);
    const std::size_t pos = hdr.payload;
    for (std::size_t i = 0; i < need; ++i)
        labels.ids[i] = static_cast<std::uint8_t>(bytes[pos + i]);
    return labels;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    manifest.validate();
    std::ostringstream out;
    out << "version=" << manifest.version << "\n";
    out << "ignore_index=" << manifest.ignore_index << "\n";
    out << "seed=" << manifest.seed << "\n";
    char buf[96];
    for (const ManifestClass& cls : manifest.classes) {
        std::snprintf(buf, sizeof(buf), "class=%d %.17g %.17g %.17g %s ", cls.id,
                      cls.color[0], cls.color[1], cls.color[2],
                      cls.seen ? "seen" : "unseen");
        out << buf << cls.name << "\n";
    }
    for (const auto& [image, label] : manifest.pairs)
        out << "pair=" << image << " " << label << "\n";
    write_file_bytes(path, out.str());
}

// key=value lines; class and pair lines repeat; names may contain spaces, so
// the class name is everything after the seen/unseen flag.
DatasetManifest parse_manifest_text(const std::string& text, const std::string& path) {
    DatasetManifest m;
    bool saw_version = false, saw_ignore = false, saw_seed = false;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        const std::string where = "'" + path + "' line " + std::to_string(line_no);
        if (eq == std::string::npos)
            throw DataError("manifest: " + where + ": expected key=value");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        std::istringstream fields(value);
        if (key == "version") {
            if (saw_version) throw DataError("manifest: " + where + ": duplicate version");
            if (!(fields >> m.version) || !(fields >> std::ws).eof())
                throw DataError("manifest: " + where + ": bad version field");
            saw_version = true;
        } else if (key == "ignore_index") {
            if (saw_ignore) throw DataError("manifest: " + where + ": duplicate ignore_index");
            if (!(fields >> m.ignore_index) || !(fields >> std::ws).eof())
                throw DataError("manifest: " + where + ": bad ignore_index field");
            saw_ignore = true;
        } else if (key == "seed") {
            if (saw_seed) throw DataError("manifest: " + where + ": duplicate seed");
            if (!(fields >> m.seed) || !(fields >> std::ws).eof())
                throw DataError("manifest: " + where + ": bad seed field");
            saw_seed = true;
        } else if (key == "class") {
            ManifestClass cls;
            std::string flag;
            if (!(fields >> cls.id >> cls.color[0] >> cls.color[1] >> cls.color[2] >> flag))
                throw DataError("manifest: " + where + ": bad class field");
            if (flag != "seen" && flag != "unseen")
                throw DataError("manifest: " + where + ": split flag must be seen or unseen");
            cls.seen = flag == "seen";
            if (fields.get() != ' ' || !std::getline(fields, cls.name) || cls.name.empty())
                throw DataError("manifest: " + where + ": missing class name");
            m.classes.push_back(cls);
        } else if (key == "pair") {
            std::string image, label;
            if (!(fields >> image >> label) || !(fields >> std::ws).eof())
                throw DataError("manifest: " + where + ": pair needs exactly two paths");
            m.pairs.emplace_back(image, label);
        } else {
            throw DataError("manifest: " + where + ": unknown field '" + key + "'");
        }
    }
    if (!saw_version) throw DataError("manifest: '" + path + "': missing version field");
    if (!saw_ignore) throw DataError("manifest: '" + path + "': missing ignore_index field");
    if (!saw_seed) throw DataError("manifest: '" + path + "': missing seed field");
    return m;
}

DatasetManifest load_manifest(const std::string& path) {
    DatasetManifest m = parse_manifest_text(read_file_bytes(path), path);
    m.validate();
    m.base_dir = fs::path(path).parent_path().string();
    for (const auto& [image, label] : m.pairs) {
        for (const std::string& rel : {image, label}) {
            const fs::path full = fs::path(m.base_dir) / rel;
            if (!fs::exists(full))
                throw DataError("manifest: referenced file '" + full.string() +
                                "' does not exist");
        }
    }
    return m;
}

DatasetManifest gen_dataset(const SceneSpec& spec, int count, std::uint64_t seed,
                            const std::string& out_dir) {
    spec.validate();
    if (count < 1) throw ArgumentError("gen_dataset: count must be >= 1");
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    fs::create_directories(fs::path(out_dir) / "labels", ec);
    if (ec) throw DataError("gen_dataset: cannot create '" + out_dir + "': " + ec.message());

    DatasetManifest m;
    m.seed = seed;
    for (const SceneClass& cls : spec.classes)
        m.classes.push_back({cls.id, cls.name, cls.color, cls.seen});

    char name[64];
    for (int i = 0; i < count; ++i) {
        Rng rng(hash_combine(hash_combine(seed, std::string_view("scene")),
                             static_cast<std::uint64_t>(i)));
        Tensor4 img;
        LabelMap lab;
        render_scene(spec, rng, img, lab);
        std::snprintf(name, sizeof(name), "images/img_%05d.ppm", i);
        const std::string image_rel = name;
        std::snprintf(name, sizeof(name), "labels/lab_%05d.pgm", i);
        const std::string label_rel = name;
        write_image(img, (fs::path(out_dir) / image_rel).string());
        write_labels(lab, (fs::path(out_dir) / label_rel).string());
        m.pairs.emplace_back(image_rel, label_rel);
    }
    save_manifest(m, (fs::path(out_dir) / "manifest.txt").string());
    m.base_dir = out_dir;
    return m;
}

LoadedDataset load_dataset(const std::string& manifest_path) {
    LoadedDataset ds;
    ds.manifest = load_manifest(manifest_path);
    for (const auto& [image_rel, label_rel] : ds.manifest.pairs) {
        Tensor4 img = read_image((fs::path(ds.manifest.base_dir) / image_rel).string());
        LabelMap lab = read_labels((fs::path(ds.manifest.base_dir) / label_rel).string());
        if (lab.h != img.h || lab.w != img.w)
            throw DataError("dataset: '" + label_rel + "' does not match its image size");
        ds.images.push_back(std::move(img));
        ds.labels.push_back(std::move(lab));
    }
    return ds;
}

}  // namespace dseg
