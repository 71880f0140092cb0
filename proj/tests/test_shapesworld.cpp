#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>

#include "flowbridge/shapesworld.hpp"

using namespace flowbridge;

namespace {

std::vector<SceneSpec> all_one_object_scenes() {
    std::vector<SceneSpec> out;
    for (int s = 0; s < 3; ++s)
        for (int c = 0; c < 4; ++c)
            for (int cell = 0; cell < 4; ++cell) {
                SceneSpec sc;
                sc.objects.push_back(
                    {static_cast<Shape>(s), static_cast<Color>(c), cell / 2, cell % 2});
                out.push_back(sc);
            }
    return out;
}

std::vector<SceneSpec> all_two_object_scenes() {
    std::vector<SceneSpec> out;
    for (int cell1 = 0; cell1 < 4; ++cell1)
        for (int cell2 = cell1 + 1; cell2 < 4; ++cell2)
            for (int s1 = 0; s1 < 3; ++s1)
                for (int c1 = 0; c1 < 4; ++c1)
                    for (int s2 = 0; s2 < 3; ++s2)
                        for (int c2 = 0; c2 < 4; ++c2) {
                            SceneSpec sc;
                            sc.objects.push_back({static_cast<Shape>(s1), static_cast<Color>(c1),
                                                  cell1 / 2, cell1 % 2});
                            sc.objects.push_back({static_cast<Shape>(s2), static_cast<Color>(c2),
                                                  cell2 / 2, cell2 % 2});
                            out.push_back(sc);
                        }
    return out;
}

bool detections_match(const std::vector<Detection>& det, const SceneSpec& scene) {
    if (det.size() != scene.objects.size()) return false;
    for (size_t i = 0; i < det.size(); ++i)
        if (!matches_object(det[i], scene.objects[i])) return false;
    return true;
}

}  // namespace

TEST_CASE("sample_scene: bounds, determinism, shape frequencies, distinct cells") {
    Rng r1(5), r2(5);
    for (int i = 0; i < 50; ++i) {
        SceneSpec a = sample_scene(r1, 3), b = sample_scene(r2, 3);
        CHECK(a.objects == b.objects);
        std::set<std::pair<int, int>> cells;
        for (auto& o : a.objects) cells.insert({o.row, o.col});
        CHECK(cells.size() == a.objects.size());
        for (size_t j = 1; j < a.objects.size(); ++j) {
            bool ordered = a.objects[j - 1].row < a.objects[j].row ||
                           (a.objects[j - 1].row == a.objects[j].row &&
                            a.objects[j - 1].col < a.objects[j].col);
            CHECK(ordered);
        }
    }
    Rng r3(6);
    for (int i = 0; i < 20; ++i) CHECK(sample_scene(r3, 1).objects.size() == 1);
    CHECK_THROWS_AS(sample_scene(r3, 0), ContractViolation);
    CHECK_THROWS_AS(sample_scene(r3, 4), ContractViolation);

    Rng r4(7);
    std::map<Shape, int> freq;
    int total = 0;
    for (int i = 0; i < 10000; ++i)
        for (auto& o : sample_scene(r4, 3).objects) {
            ++freq[o.shape];
            ++total;
        }
    for (auto& [s, n] : freq) {
        double f = static_cast<double>(n) / total;
        CHECK(f >= 0.31);
        CHECK(f <= 0.36);
    }
}

TEST_CASE("render_scene: background exactness, center color, determinism") {
    SceneSpec sc;
    sc.objects.push_back({Shape::circle, Color::red, 0, 0});
    Tensor<float> img = render_scene(sc, 32);
    CHECK(img.shape == std::vector<int>{3, 32, 32});
    auto px = [&](int c, int y, int x) { return img.at((c * 32 + y) * 32 + x); };
    // cell (0,0) center: red high, green/blue low
    CHECK(px(0, 8, 8) > 0.5f);
    CHECK(px(1, 8, 8) < -0.5f);
    CHECK(px(2, 8, 8) < -0.5f);
    // the three empty cells are exactly background
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                if (y >= 16 || x >= 16) CHECK(px(c, y, x) == kBackground);

    CHECK(render_scene(sc, 32).data == img.data);
    sc.tier = Tier::high;
    CHECK(render_scene(sc, 32).data == render_scene(sc, 32).data);
    CHECK_THROWS_AS(render_scene(sc, 31), ContractViolation);
}

TEST_CASE("caption forms") {
    SceneSpec one;
    one.objects.push_back({Shape::circle, Color::red, 0, 0});
    CHECK(caption_of(one) == "a photo of a red circle");

    SceneSpec two;
    two.objects.push_back({Shape::circle, Color::red, 0, 0});
    two.objects.push_back({Shape::square, Color::blue, 0, 1});
    CHECK(caption_of(two) == "a photo of a red circle and a blue square");
    CHECK(positional_caption(two) == "a photo of a red circle left of a blue square");

    SceneSpec stacked;
    stacked.objects.push_back({Shape::triangle, Color::green, 0, 1});
    stacked.objects.push_back({Shape::circle, Color::yellow, 1, 1});
    CHECK(positional_caption(stacked) == "a photo of a green triangle above a yellow circle");

    SceneSpec twin;
    twin.objects.push_back({Shape::square, Color::red, 0, 0});
    twin.objects.push_back({Shape::square, Color::blue, 1, 1});
    CHECK(*counting_caption(twin) == "a photo of two squares");

    SceneSpec three;
    for (int cell : {0, 1, 2})
        three.objects.push_back({Shape::circle, static_cast<Color>(cell), cell / 2, cell % 2});
    CHECK(caption_of(three) == "a photo of three circles");

    SceneSpec mixed;
    mixed.objects.push_back({Shape::circle, Color::red, 0, 0});
    mixed.objects.push_back({Shape::square, Color::blue, 0, 1});
    mixed.objects.push_back({Shape::triangle, Color::green, 1, 0});
    CHECK(caption_of(mixed) ==
          "a photo of a red circle and a blue square and a green triangle");
}

TEST_CASE("caption_of: equal captions imply equal object multisets (1-2 objects)") {
    auto key = [](const SceneSpec& sc) {
        std::multiset<std::pair<int, int>> k;
        for (auto& o : sc.objects)
            k.insert({static_cast<int>(o.shape), static_cast<int>(o.color)});
        return k;
    };
    std::map<std::string, std::multiset<std::pair<int, int>>> seen;
    auto probe = [&](const SceneSpec& sc) {
        std::string cap = caption_of(sc);
        auto it = seen.find(cap);
        if (it == seen.end()) seen.emplace(cap, key(sc));
        else CHECK(it->second == key(sc));
    };
    for (const auto& sc : all_one_object_scenes()) probe(sc);
    for (const auto& sc : all_two_object_scenes()) probe(sc);
}

TEST_CASE("detector: exhaustive roundtrip at size 32, both tiers") {
    for (Tier tier : {Tier::standard, Tier::high}) {
        for (SceneSpec sc : all_one_object_scenes()) {
            sc.tier = tier;
            CHECK(detections_match(detect_objects(render_scene(sc, 32)), sc));
        }
        for (SceneSpec sc : all_two_object_scenes()) {
            sc.tier = tier;
            CHECK(detections_match(detect_objects(render_scene(sc, 32)), sc));
        }
        Rng rng(11);
        for (int i = 0; i < 1000; ++i) {
            SceneSpec sc = sample_scene(rng, 3);
            sc.tier = tier;
            CHECK(detections_match(detect_objects(render_scene(sc, 32)), sc));
        }
    }
}

TEST_CASE("detector: empty image, noise robustness") {
    Tensor<float> bg({3, 32, 32});
    std::fill(bg.data.begin(), bg.data.end(), kBackground);
    CHECK(detect_objects(bg).empty());

    Rng rng(12);
    for (int i = 0; i < 50; ++i) {
        for (Tier tier : {Tier::standard, Tier::high}) {
            SceneSpec sc = sample_scene(rng, 3);
            sc.tier = tier;
            Tensor<float> img = render_scene(sc, 32);
            std::vector<Detection> clean = detect_objects(img);
            for (auto& v : img.data) v += 0.05f * static_cast<float>(rng.normal());
            CHECK(detect_objects(img) == clean);
        }
    }
}

TEST_CASE("check_case semantics") {
    PromptCase single;
    single.category = Category::single_object;
    single.scene.objects.push_back({Shape::circle, Color::red, 0, 0});
    CHECK(check_case(single, {{Shape::circle, Color::red, 0, 0}}));
    CHECK(check_case(single, {{Shape::circle, Color::blue, 1, 1}}));  // shape presence only
    CHECK_FALSE(check_case(single, {{Shape::square, Color::red, 0, 0}}));
    CHECK_FALSE(check_case(single, {{Shape::circle, Color::red, 0, 0},
                                    {Shape::square, Color::blue, 0, 1}}));  // extras fail

    PromptCase count3;
    count3.category = Category::counting;
    for (int cell : {0, 1, 2})
        count3.scene.objects.push_back({Shape::circle, Color::red, cell / 2, cell % 2});
    CHECK_FALSE(check_case(count3, {{Shape::circle, Color::red, 0, 0},
                                    {Shape::circle, Color::red, 0, 1}}));  // two != three
    CHECK(check_case(count3, {{Shape::circle, Color::red, 0, 0},
                              {Shape::circle, Color::blue, 0, 1},
                              {Shape::circle, Color::green, 1, 0}}));

    PromptCase pos;
    pos.category = Category::position;
    pos.scene.objects.push_back({Shape::circle, Color::red, 0, 0});
    pos.scene.objects.push_back({Shape::square, Color::blue, 0, 1});  // circle left of square
    CHECK(check_case(pos, {{Shape::circle, Color::red, 0, 0}, {Shape::square, Color::blue, 0, 1}}));
    CHECK_FALSE(check_case(pos, {{Shape::circle, Color::red, 0, 1},
                                 {Shape::square, Color::blue, 0, 0}}));  // columns reversed

    PromptCase attr;
    attr.category = Category::color_attribution;
    attr.scene.objects.push_back({Shape::circle, Color::red, 0, 0});
    attr.scene.objects.push_back({Shape::square, Color::blue, 0, 1});
    CHECK(check_case(attr, {{Shape::square, Color::blue, 1, 1}, {Shape::circle, Color::red, 0, 0}}));
    CHECK_FALSE(
        check_case(attr, {{Shape::circle, Color::blue, 0, 0}, {Shape::square, Color::red, 0, 1}}));
}

TEST_CASE("geneval_suite: size, prefix, determinism, witness consistency") {
    auto suite = geneval_suite(3, 20);
    CHECK(suite.size() == 120);
    auto again = geneval_suite(3, 20);
    for (size_t i = 0; i < suite.size(); ++i) {
        CHECK(suite[i].prompt == again[i].prompt);
        CHECK(suite[i].prompt.rfind("a photo of", 0) == 0);
        // the witness scene must satisfy its own prompt when rendered
        CHECK(check_case(suite[i], detect_objects(render_scene(suite[i].scene, 32))));
    }
    std::map<Category, int> per_cat;
    for (auto& pc : suite) ++per_cat[pc.category];
    for (auto& [c, n] : per_cat) CHECK(n == 20);
    CHECK_THROWS_AS(geneval_suite(3, 0), ContractViolation);
}

TEST_CASE("evaluate: oracle scores 1.0, failing model 0.0, mean aggregation") {
    auto suite = geneval_suite(4, 2);
    std::map<std::string, SceneSpec> witness;
    for (auto& pc : suite) witness.emplace(pc.prompt, pc.scene);
    auto oracle = [&](const std::string& prompt, uint64_t) {
        return render_scene(witness.at(prompt), 32);
    };
    EvalReport r = evaluate(oracle, suite, 4);
    CHECK(r.overall == 1.0);
    for (auto& [k, v] : r.per_category) CHECK(v == 1.0);

    auto blank = [](const std::string&, uint64_t) {
        Tensor<float> t({3, 32, 32});
        std::fill(t.data.begin(), t.data.end(), kBackground);
        return t;
    };
    CHECK(evaluate(blank, suite, 4).overall == 0.0);

    // pass pattern per sequential case: {1,1, 1,0, 1,0, 1,1, 0,0, 0,0}
    std::vector<int> pattern = {1, 1, 1, 0, 1, 0, 1, 1, 0, 0, 0, 0};
    size_t call = 0;
    auto scripted = [&](const std::string& prompt, uint64_t) {
        bool pass = pattern[call++] != 0;
        return pass ? render_scene(witness.at(prompt), 32) : blank("", 0);
    };
    EvalReport s = evaluate(scripted, suite, 1);
    CHECK(s.overall == doctest::Approx(0.5).epsilon(1e-12));
    double mean = 0;
    for (auto& [k, v] : s.per_category) mean += v;
    CHECK(std::abs(s.overall - mean / 6.0) < 1e-12);
    CHECK(s.per_category.size() == 6);

    CHECK_THROWS_AS(evaluate(blank, suite, 0), ContractViolation);
}

TEST_CASE("ppm round-trip and byte mapping") {
    CHECK(to_byte(-1.0f) == 0);
    CHECK(to_byte(1.0f) == 255);
    CHECK(to_byte(0.0f) == 128);  // round(127.5) away from zero
    CHECK(to_byte(kBackground) == 51);
    CHECK(from_byte(51) == kBackground);

    Rng rng(13);
    SceneSpec sc = sample_scene(rng, 3);
    Tensor<float> img = render_scene(sc, 32);
    std::string path = "ppm_test.ppm";
    write_ppm(path, img);
    Tensor<float> back = read_ppm(path);
    CHECK(back.shape == img.shape);
    for (int64_t i = 0; i < img.size(); ++i)
        CHECK(back.at(i) == from_byte(to_byte(img.at(i))));
    CHECK(detections_match(detect_objects(back), sc));
    std::filesystem::remove(path);
}

TEST_CASE("generate_dataset: determinism, manifest, detector consistency") {
    namespace fs = std::filesystem;
    fs::remove_all("swtest_a");
    fs::remove_all("swtest_b");
    std::string d1 = generate_dataset("swtest_a", 200, 7, Tier::high);
    std::string d2 = generate_dataset("swtest_b", 200, 7, Tier::high);
    CHECK(d1 == d2);

    std::ifstream mf("swtest_a/manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    CHECK(manifest.at("tier") == "high");
    CHECK(manifest.at("n") == 200);
    CHECK(manifest.at("digest") == d1);

    auto records = load_dataset_records("swtest_a");
    CHECK(records.size() == 200);
    for (auto& r : records) {
        Tensor<float> img = read_ppm(r.image_path);
        CHECK(detections_match(detect_objects(img), r.scene));
        // caption is one of the scene's valid forms
        auto forms = valid_captions(r.scene);
        CHECK(std::find(forms.begin(), forms.end(), r.caption) != forms.end());
    }
    fs::remove_all("swtest_a");
    fs::remove_all("swtest_b");

    std::ofstream("swtest_file").put('x');  // a plain file blocks directory creation
    CHECK_THROWS_AS(generate_dataset("swtest_file/sub", 1, 1, Tier::standard), IoError);
    fs::remove("swtest_file");
}
