#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include <json.hpp>

#include "flowbridge/digest.hpp"
#include "flowbridge/rng.hpp"
#include "flowbridge/tensor.hpp"

namespace flowbridge {

enum class Shape { circle, square, triangle };
enum class Color { red, green, blue, yellow };
enum class Tier { standard, high };

inline const char* shape_name(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::square: return "square";
        default: return "triangle";
    }
}
inline const char* shape_plural(Shape s) {
    switch (s) {
        case Shape::circle: return "circles";
        case Shape::square: return "squares";
        default: return "triangles";
    }
}
inline const char* color_name(Color c) {
    switch (c) {
        case Color::red: return "red";
        case Color::green: return "green";
        case Color::blue: return "blue";
        default: return "yellow";
    }
}
inline const char* tier_name(Tier t) { return t == Tier::standard ? "standard" : "high"; }

inline Shape shape_from_name(const std::string& s) {
    for (Shape v : {Shape::circle, Shape::square, Shape::triangle})
        if (s == shape_name(v) || s == shape_plural(v)) return v;
    throw ConfigError("unknown shape: " + s);
}
inline Color color_from_name(const std::string& s) {
    for (Color v : {Color::red, Color::green, Color::blue, Color::yellow})
        if (s == color_name(v)) return v;
    throw ConfigError("unknown color: " + s);
}
inline Tier tier_from_name(const std::string& s) {
    if (s == "standard") return Tier::standard;
    if (s == "high") return Tier::high;
    throw ConfigError("unknown tier: " + s);
}

constexpr float kBackground = -0.6f;

inline std::array<float, 3> color_rgb(Color c) {
    switch (c) {
        case Color::red: return {1.0f, -1.0f, -1.0f};
        case Color::green: return {-1.0f, 1.0f, -1.0f};
        case Color::blue: return {-1.0f, -1.0f, 1.0f};
        default: return {1.0f, 1.0f, -1.0f};
    }
}

// One object per 2x2 grid cell.
struct ObjectSpec {
    Shape shape;
    Color color;
    int row = 0;
    int col = 0;

    bool operator==(const ObjectSpec&) const = default;
};

struct SceneSpec {
    std::vector<ObjectSpec> objects;  // canonical row-major cell order
    Tier tier = Tier::standard;

    void canonicalize() {
        std::sort(objects.begin(), objects.end(), [](const ObjectSpec& a, const ObjectSpec& b) {
            return a.row != b.row ? a.row < b.row : a.col < b.col;
        });
    }
};

// ---------------------------------------------------------------------------
// scene sampling

inline SceneSpec sample_scene(Rng& rng, int max_objects) {
    if (max_objects < 1 || max_objects > 3)
        throw ContractViolation("sample_scene: max_objects must lie in [1,3]");
    SceneSpec scene;
    int n = 1 + rng.uniform_int(max_objects);
    std::array<int, 4> cells = {0, 1, 2, 3};
    for (int i = 0; i < n; ++i) {  // Fisher-Yates prefix = distinct cells
        int j = i + rng.uniform_int(4 - i);
        std::swap(cells[static_cast<size_t>(i)], cells[static_cast<size_t>(j)]);
        ObjectSpec o;
        o.shape = static_cast<Shape>(rng.uniform_int(3));
        o.color = static_cast<Color>(rng.uniform_int(4));
        o.row = cells[static_cast<size_t>(i)] / 2;
        o.col = cells[static_cast<size_t>(i)] % 2;
        scene.objects.push_back(o);
    }
    scene.canonicalize();
    return scene;
}

// ---------------------------------------------------------------------------
// rendering

namespace detail {

// inside-test in doubled pixel coordinates: point (dx, dy) relative to the
// cell center, half-extent h — all integers, so rasterization is exact
inline bool inside_shape(Shape s, int dx, int dy, int h) {
    switch (s) {
        case Shape::square:
            return std::abs(dx) <= h && std::abs(dy) <= h;
        case Shape::circle:
            return dx * dx + dy * dy <= h * h;
        default: {  // upward triangle: apex (0,-h), base corners (+-h, +h)
            if (dy < -h || dy > h) return false;
            return 2 * std::abs(dx) <= dy + h;
        }
    }
}

}  // namespace detail

// Deterministic rasterization onto a [3, size, size] tensor in [-1,1]: each
// object centered in its 2x2-grid cell at 70% cell extent. Standard tier is
// pure integer point sampling; high tier averages a 2x2 subsample grid.
inline Tensor<float> render_scene(const SceneSpec& spec, int size) {
    if (size < 2 || size % 2 != 0)
        throw ContractViolation("render_scene: size must be even and >= 2");
    Tensor<float> img({3, size, size});
    std::fill(img.data.begin(), img.data.end(), kBackground);
    const int cell = size / 2;
    const int h = static_cast<int>(std::lround(0.7 * cell));  // half-extent, doubled coords
    for (const ObjectSpec& o : spec.objects) {
        const int ccx = (2 * o.col + 1) * cell;  // doubled coords
        const int ccy = (2 * o.row + 1) * cell;
        auto rgb = color_rgb(o.color);
        for (int y = o.row * cell; y < (o.row + 1) * cell; ++y) {
            for (int x = o.col * cell; x < (o.col + 1) * cell; ++x) {
                float cov;
                if (spec.tier == Tier::standard) {
                    cov = detail::inside_shape(o.shape, 2 * x + 1 - ccx, 2 * y + 1 - ccy, h)
                              ? 1.0f
                              : 0.0f;
                } else {
                    int hits = 0;  // subsample centers at quarter offsets (x4 coords)
                    for (int sy : {1, 3})
                        for (int sx : {1, 3})
                            hits += detail::inside_shape(o.shape, 4 * x + sx - 2 * ccx,
                                                         4 * y + sy - 2 * ccy, 2 * h)
                                        ? 1
                                        : 0;
                    cov = static_cast<float>(hits) / 4.0f;
                }
                if (cov > 0.0f)
                    for (int c = 0; c < 3; ++c)
                        img.at((static_cast<int64_t>(c) * size + y) * size + x) =
                            kBackground + cov * (rgb[static_cast<size_t>(c)] - kBackground);
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// captions

inline std::string object_phrase(const ObjectSpec& o) {
    return std::string("a ") + color_name(o.color) + " " + shape_name(o.shape);
}

// Canonical caption: 1 object -> "a photo of a <color> <shape>"; 2 -> the
// "and" form; 3 with equal shapes -> "a photo of three <shape>s", else
// enumeration.
inline std::string caption_of(const SceneSpec& spec) {
    const auto& os = spec.objects;
    if (os.empty()) throw ContractViolation("caption_of: empty scene");
    if (os.size() == 3 && os[0].shape == os[1].shape && os[1].shape == os[2].shape)
        return std::string("a photo of three ") + shape_plural(os[0].shape);
    std::string out = "a photo of " + object_phrase(os[0]);
    for (size_t i = 1; i < os.size(); ++i) out += " and " + object_phrase(os[i]);
    return out;
}

// Spatial relation of canonical-first a w.r.t. b: column difference wins,
// rows break ties.
inline std::string relation_of(const ObjectSpec& a, const ObjectSpec& b) {
    if (a.col < b.col) return "left of";
    if (a.col > b.col) return "right of";
    return a.row < b.row ? "above" : "below";
}

// Positional two-object variant: "a photo of a <c> <s> <rel> a <c> <s>".
inline std::string positional_caption(const SceneSpec& spec) {
    if (spec.objects.size() != 2)
        throw ContractViolation("positional_caption: needs exactly two objects");
    return "a photo of " + object_phrase(spec.objects[0]) + " " +
           relation_of(spec.objects[0], spec.objects[1]) + " " + object_phrase(spec.objects[1]);
}

// Counting variant for scenes whose objects share one shape.
inline std::optional<std::string> counting_caption(const SceneSpec& spec) {
    const auto& os = spec.objects;
    if (os.size() < 2) return std::nullopt;
    for (const auto& o : os)
        if (o.shape != os[0].shape) return std::nullopt;
    return std::string("a photo of ") + (os.size() == 2 ? "two " : "three ") +
           shape_plural(os[0].shape);
}

// Every caption the scene can truthfully carry; the canonical form first.
inline std::vector<std::string> valid_captions(const SceneSpec& spec) {
    std::vector<std::string> out{caption_of(spec)};
    if (spec.objects.size() == 2) {
        out.push_back(positional_caption(spec));
        // the 3-same-shape canonical form already is the counting form
        if (auto c = counting_caption(spec)) out.push_back(*c);
    } else if (spec.objects.size() == 3 &&
               !(spec.objects[0].shape == spec.objects[1].shape &&
                 spec.objects[1].shape == spec.objects[2].shape)) {
        // enumeration is canonical here; nothing to add
    }
    return out;
}

// ---------------------------------------------------------------------------
// detection (oracle detector replacing GenEval's object detector)

struct Detection {
    Shape shape;
    Color color;
    int row = 0;
    int col = 0;

    bool operator==(const Detection&) const = default;
};

inline bool matches_object(const Detection& d, const ObjectSpec& o) {
    return d.shape == o.shape && d.color == o.color && d.row == o.row && d.col == o.col;
}

// Per-cell segmentation against the background, nearest-color classification
// (tolerance 0.25 per channel on core pixels), shape from bounding-box fill
// ratio. Unrecognizable cells yield no detection.
inline std::vector<Detection> detect_objects(const Tensor<float>& image) {
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2))
        throw DimensionError("detect_objects: expected [3,size,size], got " +
                             shape_str(image.shape));
    const int size = image.dim(1);
    const int cell = size / 2;
    auto px = [&](int c, int y, int x) {
        return image.at((static_cast<int64_t>(c) * size + y) * size + x);
    };
    std::vector<Detection> out;
    for (int row = 0; row < 2; ++row) {
        for (int col = 0; col < 2; ++col) {
            int count = 0;
            double sum[3] = {0, 0, 0};
            int core = 0;
            std::vector<int> row_hits(static_cast<size_t>(cell), 0),
                col_hits(static_cast<size_t>(cell), 0);
            for (int y = row * cell; y < (row + 1) * cell; ++y) {
                for (int x = col * cell; x < (col + 1) * cell; ++x) {
                    float dev = 0;
                    for (int c = 0; c < 3; ++c)
                        dev = std::max(dev, std::abs(px(c, y, x) - kBackground));
                    if (dev > 1.0f) {  // object mask; coverage levels sit at 0.4/0.8/1.2/1.6,
                                       // so mid-gap cutoffs survive quantization and noise
                        ++count;
                        ++row_hits[static_cast<size_t>(y - row * cell)];
                        ++col_hits[static_cast<size_t>(x - col * cell)];
                    }
                    if (dev > 1.4f) {  // full-coverage core pixels for color averaging
                        ++core;
                        for (int c = 0; c < 3; ++c) sum[c] += px(c, y, x);
                    }
                }
            }
            if (count < 8 || core < 4) continue;
            // bounding box from rows/columns holding at least 2 mask pixels:
            // a single noise-flipped edge pixel cannot stretch the box
            int minx = cell, maxx = -1, miny = cell, maxy = -1;
            for (int i = 0; i < cell; ++i) {
                if (row_hits[static_cast<size_t>(i)] >= 2) {
                    miny = std::min(miny, i);
                    maxy = std::max(maxy, i);
                }
                if (col_hits[static_cast<size_t>(i)] >= 2) {
                    minx = std::min(minx, i);
                    maxx = std::max(maxx, i);
                }
            }
            if (maxx < 0 || maxy < 0) continue;
            std::optional<Color> best;
            for (Color c : {Color::red, Color::green, Color::blue, Color::yellow}) {
                auto rgb = color_rgb(c);
                bool ok = true;
                for (int ch = 0; ch < 3; ++ch)
                    ok = ok && std::abs(sum[ch] / core - rgb[static_cast<size_t>(ch)]) <= 0.25;
                if (ok) {
                    best = c;
                    break;
                }
            }
            if (!best) continue;
            double fill = static_cast<double>(count) /
                          (static_cast<double>(maxx - minx + 1) * (maxy - miny + 1));
            Shape shape;
            // clean fills with the trimmed box: square 1.00, circle 0.88,
            // triangle 0.65-0.70 — cutoffs sit mid-gap
            if (fill >= 0.94) shape = Shape::square;
            else if (fill >= 0.79) shape = Shape::circle;
            else if (fill >= 0.35) shape = Shape::triangle;
            else continue;
            out.push_back({shape, *best, row, col});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// GenEval-mini suite

enum class Category {
    single_object,
    two_object,
    counting,
    colors,
    position,
    color_attribution
};

inline const char* category_name(Category c) {
    switch (c) {
        case Category::single_object: return "single_object";
        case Category::two_object: return "two_object";
        case Category::counting: return "counting";
        case Category::colors: return "colors";
        case Category::position: return "position";
        default: return "color_attribution";
    }
}
inline std::vector<Category> all_categories() {
    return {Category::single_object, Category::two_object,   Category::counting,
            Category::colors,        Category::position,     Category::color_attribution};
}

struct PromptCase {
    Category category;
    std::string prompt;
    SceneSpec scene;  // a witness scene satisfying the prompt (oracle rendering)
};

inline bool check_case(const PromptCase& pc, const std::vector<Detection>& det) {
    const auto& os = pc.scene.objects;
    auto has = [&](Shape s, std::optional<Color> c) {
        for (const auto& d : det)
            if (d.shape == s && (!c || d.color == *c)) return true;
        return false;
    };
    switch (pc.category) {
        case Category::single_object:
            // shape presence; extra objects fail
            return det.size() == 1 && det[0].shape == os[0].shape;
        case Category::two_object:
            return has(os[0].shape, std::nullopt) && has(os[1].shape, std::nullopt);
        case Category::counting: {
            // exact count of the named shape and nothing else
            if (det.size() != os.size()) return false;
            for (const auto& d : det)
                if (d.shape != os[0].shape) return false;
            return true;
        }
        case Category::colors:
            return has(os[0].shape, os[0].color);
        case Category::position: {
            for (const auto& a : det)
                for (const auto& b : det) {
                    if (&a == &b) continue;
                    if (a.shape != os[0].shape || a.color != os[0].color) continue;
                    if (b.shape != os[1].shape || b.color != os[1].color) continue;
                    const std::string rel = relation_of(os[0], os[1]);
                    if (rel == "left of" && a.col < b.col) return true;
                    if (rel == "right of" && a.col > b.col) return true;
                    if (rel == "above" && a.row < b.row) return true;
                    if (rel == "below" && a.row > b.row) return true;
                }
            return false;
        }
        default:  // color_attribution
            return has(os[0].shape, os[0].color) && has(os[1].shape, os[1].color);
    }
}

// per_category prompt cases per category; prompts all start "a photo of".
inline std::vector<PromptCase> geneval_suite(uint64_t seed, int per_category) {
    if (per_category < 1) throw ContractViolation("geneval_suite: per_category must be >= 1");
    Rng rng(seed);
    std::vector<PromptCase> out;
    auto rnd_shape = [&] { return static_cast<Shape>(rng.uniform_int(3)); };
    auto rnd_color = [&] { return static_cast<Color>(rng.uniform_int(4)); };
    for (Category cat : all_categories()) {
        for (int i = 0; i < per_category; ++i) {
            PromptCase pc;
            pc.category = cat;
            SceneSpec& sc = pc.scene;
            switch (cat) {
                case Category::single_object:
                case Category::colors: {
                    sc.objects.push_back({rnd_shape(), rnd_color(), rng.uniform_int(2),
                                          rng.uniform_int(2)});
                    pc.prompt = caption_of(sc);
                    break;
                }
                case Category::two_object:
                case Category::color_attribution: {
                    Shape s1 = rnd_shape(), s2 = rnd_shape();
                    while (s2 == s1) s2 = rnd_shape();
                    Color c1 = rnd_color(), c2 = rnd_color();
                    if (cat == Category::color_attribution)
                        while (c2 == c1) c2 = rnd_color();
                    int cell1 = rng.uniform_int(4);
                    int cell2 = rng.uniform_int(4);
                    while (cell2 == cell1) cell2 = rng.uniform_int(4);
                    sc.objects.push_back({s1, c1, cell1 / 2, cell1 % 2});
                    sc.objects.push_back({s2, c2, cell2 / 2, cell2 % 2});
                    sc.canonicalize();
                    pc.prompt = caption_of(sc);
                    break;
                }
                case Category::counting: {
                    Shape s = rnd_shape();
                    int n = 2 + rng.uniform_int(2);
                    std::array<int, 4> cells = {0, 1, 2, 3};
                    for (int j = 0; j < n; ++j) {
                        int k = j + rng.uniform_int(4 - j);
                        std::swap(cells[static_cast<size_t>(j)], cells[static_cast<size_t>(k)]);
                        sc.objects.push_back({s, rnd_color(), cells[static_cast<size_t>(j)] / 2,
                                              cells[static_cast<size_t>(j)] % 2});
                    }
                    sc.canonicalize();
                    pc.prompt = *counting_caption(sc);
                    break;
                }
                default: {  // position
                    Shape s1 = rnd_shape(), s2 = rnd_shape();
                    Color c1 = rnd_color(), c2 = rnd_color();
                    while (s2 == s1 && c2 == c1) {
                        s2 = rnd_shape();
                        c2 = rnd_color();
                    }
                    int cell1 = rng.uniform_int(4);
                    int cell2 = rng.uniform_int(4);
                    while (cell2 == cell1) cell2 = rng.uniform_int(4);
                    sc.objects.push_back({s1, c1, cell1 / 2, cell1 % 2});
                    sc.objects.push_back({s2, c2, cell2 / 2, cell2 % 2});
                    sc.canonicalize();
                    pc.prompt = positional_caption(sc);
                    break;
                }
            }
            out.push_back(std::move(pc));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalReport {
    std::map<std::string, double> per_category;
    std::map<std::string, std::pair<int, int>> counts;  // category -> (passed, total)
    double overall = 0.0;
};

// model: (prompt, seed) -> [3,size,size] image. Best-of-k pass rule with
// deterministic per-case seeds: case_index * stride + k.
inline EvalReport evaluate(const std::function<Tensor<float>(const std::string&, uint64_t)>& model,
                           const std::vector<PromptCase>& suite, int samples_per_prompt,
                           uint64_t seed_stride = 9973,
                           const std::function<void(size_t, size_t)>& progress = nullptr) {
    if (samples_per_prompt < 1)
        throw ContractViolation("evaluate: samples_per_prompt must be >= 1");
    EvalReport rep;
    for (Category c : all_categories()) {
        rep.per_category[category_name(c)] = 0.0;
        rep.counts[category_name(c)] = {0, 0};
    }
    for (size_t i = 0; i < suite.size(); ++i) {
        const PromptCase& pc = suite[i];
        bool pass = false;
        for (int k = 0; k < samples_per_prompt && !pass; ++k) {
            Tensor<float> img = model(pc.prompt, i * seed_stride + static_cast<uint64_t>(k));
            pass = check_case(pc, detect_objects(img));
        }
        auto& [passed, total] = rep.counts[category_name(pc.category)];
        passed += pass ? 1 : 0;
        ++total;
        if (progress) progress(i + 1, suite.size());
    }
    double sum = 0.0;
    for (auto& [name, pt] : rep.counts) {
        double score = pt.second ? static_cast<double>(pt.first) / pt.second : 0.0;
        rep.per_category[name] = score;
        sum += score;
    }
    rep.overall = sum / static_cast<double>(rep.per_category.size());
    return rep;
}

// ---------------------------------------------------------------------------
// serialization & dataset files

inline nlohmann::json object_to_json(const ObjectSpec& o) {
    return {{"shape", shape_name(o.shape)},
            {"color", color_name(o.color)},
            {"row", o.row},
            {"col", o.col}};
}
inline ObjectSpec object_from_json(const nlohmann::json& j) {
    return {shape_from_name(j.at("shape").get<std::string>()),
            color_from_name(j.at("color").get<std::string>()), j.at("row").get<int>(),
            j.at("col").get<int>()};
}
inline nlohmann::json scene_to_json(const SceneSpec& s) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects) objs.push_back(object_to_json(o));
    return {{"objects", objs}, {"tier", tier_name(s.tier)}};
}
inline SceneSpec scene_from_json(const nlohmann::json& j) {
    SceneSpec s;
    for (const auto& o : j.at("objects")) s.objects.push_back(object_from_json(o));
    s.tier = tier_from_name(j.at("tier").get<std::string>());
    return s;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json per, counts;
    for (auto& [k, v] : r.per_category) per[k] = v;
    for (auto& [k, v] : r.counts) counts[k] = {{"passed", v.first}, {"total", v.second}};
    return {{"per_category", per}, {"counts", counts}, {"overall", r.overall}};
}

inline uint8_t to_byte(float x) {
    double v = std::lround((static_cast<double>(x) + 1.0) * 127.5);
    return static_cast<uint8_t>(std::min(255.0, std::max(0.0, v)));
}
inline float from_byte(uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }

// 8-bit binary PPM, values mapped from [-1,1] by round((x+1)*127.5).
inline void write_ppm(const std::string& path, const Tensor<float>& img) {
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw DimensionError("write_ppm: expected [3,H,W], got " + shape_str(img.shape));
    const int H = img.dim(1), W = img.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write image to " + path);
    f << "P6\n" << W << " " << H << "\n255\n";
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                uint8_t b = to_byte(img.at((static_cast<int64_t>(c) * H + y) * W + x));
                f.put(static_cast<char>(b));
            }
    if (!f) throw IoError("short write to " + path);
}

inline Tensor<float> read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read image from " + path);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    f >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255 || w <= 0 || h <= 0)
        throw IntegrityError("unsupported PPM header in " + path);
    f.get();  // single whitespace after header
    std::vector<char> buf(static_cast<size_t>(w) * h * 3);
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (f.gcount() != static_cast<std::streamsize>(buf.size()))
        throw IntegrityError("truncated PPM payload in " + path);
    Tensor<float> img({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at((static_cast<int64_t>(c) * h + y) * w + x) =
                    from_byte(static_cast<uint8_t>(buf[(static_cast<size_t>(y) * w + x) * 3 +
                                                       static_cast<size_t>(c)]));
    return img;
}

struct DatasetRecord {
    std::string caption;
    SceneSpec scene;
    std::string image_path;
};

// n (image, caption, spec) records under dir: images/NNNNNN.ppm, a JSON-lines
// sidecar, and a manifest with an FNV-1a digest over all record and image
// bytes. Captions are drawn uniformly from the scene's valid caption forms so
// every template (and-form, positional, counting) appears in training.
inline std::string generate_dataset(const std::string& dir, int n, uint64_t seed, Tier tier,
                                    int image_size = 32) {
    if (n < 1) throw ContractViolation("generate_dataset: n must be >= 1");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "images", ec);
    if (ec) throw IoError("cannot create dataset directory " + dir);
    Rng rng(seed);
    Fnv1a digest;
    std::ofstream records(fs::path(dir) / "records.jsonl");
    if (!records) throw IoError("cannot write records under " + dir);
    for (int i = 0; i < n; ++i) {
        SceneSpec scene = sample_scene(rng, 3);
        scene.tier = tier;
        std::vector<std::string> captions = valid_captions(scene);
        const std::string caption = captions[static_cast<size_t>(
            rng.uniform_int(static_cast<int>(captions.size())))];
        Tensor<float> img = render_scene(scene, image_size);
        char name[32];
        std::snprintf(name, sizeof(name), "images/%06d.ppm", i);
        write_ppm((fs::path(dir) / name).string(), img);
        nlohmann::json line = {{"caption", caption},
                               {"spec", scene_to_json(scene)},
                               {"tier", tier_name(tier)},
                               {"image", name}};
        std::string s = line.dump();
        records << s << '\n';
        digest.update(s);
        for (float v : img.data) digest.update_value(to_byte(v));
    }
    if (!records) throw IoError("short write of records under " + dir);
    nlohmann::json manifest = {{"seed", seed},
                               {"n", n},
                               {"tier", tier_name(tier)},
                               {"image_size", image_size},
                               {"digest", digest.hex()}};
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot write manifest under " + dir);
    mf << manifest.dump(2) << '\n';
    return digest.hex();
}

inline std::vector<DatasetRecord> load_dataset_records(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream f(fs::path(dir) / "records.jsonl");
    if (!f) throw IoError("cannot read dataset records under " + dir);
    std::vector<DatasetRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw IntegrityError("malformed dataset record in " + dir);
        DatasetRecord r;
        r.caption = j.at("caption").get<std::string>();
        r.scene = scene_from_json(j.at("spec"));
        r.image_path = (fs::path(dir) / j.at("image").get<std::string>()).string();
        out.push_back(std::move(r));
    }
    if (out.empty()) throw IntegrityError("empty dataset under " + dir);
    return out;
}

}  // namespace flowbridge
