#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "avfuse/dataset.hpp"

using namespace avfuse;
namespace fs = std::filesystem;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    return dot(a, b) / (norm2(a) * norm2(b));
}

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("avfuse_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("synthetic generation honors zero-spread and zero-coverage limits") {
    SynthConfig cfg;
    cfg.n_speakers = 4;
    cfg.utterances_per_speaker = 3;
    cfg.intra_spread = 0.0;
    cfg.label_coverage = 0.0;
    const Dataset ds = generate_synthetic_dataset(cfg);
    REQUIRE(ds.speakers.size() == 4);
    for (const auto& spk : ds.speakers) {
        CHECK(!spk.age.has_value());
        for (const auto& utt : spk.utterances)
            for (std::size_t i = 0; i < kAudioDim; ++i)
                CHECK(utt.audio[i] == spk.utterances[0].audio[i]);
    }
}

TEST_CASE("synthetic generation separates speakers at spread 0.05") {
    SynthConfig cfg;
    cfg.n_speakers = 50;
    cfg.utterances_per_speaker = 10;
    cfg.intra_spread = 0.05;
    cfg.seed = 3;
    const Dataset ds = generate_synthetic_dataset(cfg);

    // Oracle: mean intra-speaker vs inter-speaker cosine over the whole set.
    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t s1 = 0; s1 < ds.speakers.size(); ++s1)
        for (std::size_t s2 = s1; s2 < ds.speakers.size(); ++s2) {
            const auto& u1 = ds.speakers[s1].utterances;
            const auto& u2 = ds.speakers[s2].utterances;
            for (std::size_t i = 0; i < u1.size(); ++i)
                for (std::size_t j = (s1 == s2 ? i + 1 : 0); j < u2.size(); ++j) {
                    const double c = cosine(u1[i].audio, u2[j].audio);
                    if (s1 == s2) {
                        intra += c;
                        ++n_intra;
                    } else {
                        inter += c;
                        ++n_inter;
                    }
                }
        }
    intra /= static_cast<double>(n_intra);
    inter /= static_cast<double>(n_inter);
    CHECK(intra > inter + 0.3);  // materially separated, not just on average
    CHECK(std::abs(inter) < 0.1);
}

TEST_CASE("synthetic generation is a pure function of the config") {
    SynthConfig cfg;
    cfg.n_speakers = 6;
    cfg.utterances_per_speaker = 3;
    cfg.seed = 17;
    const Dataset a = generate_synthetic_dataset(cfg);
    const Dataset b = generate_synthetic_dataset(cfg);
    REQUIRE(a.speakers.size() == b.speakers.size());
    for (std::size_t s = 0; s < a.speakers.size(); ++s) {
        CHECK(a.speakers[s].age == b.speakers[s].age);
        for (std::size_t u = 0; u < a.speakers[s].utterances.size(); ++u) {
            CHECK(a.speakers[s].utterances[u].audio == b.speakers[s].utterances[u].audio);
            CHECK(a.speakers[s].utterances[u].visual == b.speakers[s].utterances[u].visual);
        }
    }

    CHECK(static_cast<std::size_t>(
              std::count_if(a.speakers.begin(), a.speakers.end(),
                            [](const SpeakerRecord& r) { return r.age.has_value(); })) ==
          static_cast<std::size_t>(0.8 * 6 + 0.5));
}

TEST_CASE("unsynchronized sampler never pairs an utterance with itself") {
    SynthConfig cfg;
    cfg.n_speakers = 5;
    cfg.utterances_per_speaker = 2;
    const Dataset ds = generate_synthetic_dataset(cfg);
    Rng rng(9);
    for (int round = 0; round < 50; ++round) {
        const Batch b = sample_batch_unsynchronized(ds, 3, 4, rng);
        REQUIRE(b.pairs.size() == 12);
        for (std::size_t i = 0; i < b.pairs.size(); ++i) {
            CHECK(b.pairs[i].utterance_id_audio != b.pairs[i].utterance_id_visual);
            CHECK(b.sync_fallback[i] == 0);
        }
    }
}

TEST_CASE("unsynchronized sampler covers all ordered pairs of 3 utterances") {
    SynthConfig cfg;
    cfg.n_speakers = 2;
    cfg.utterances_per_speaker = 3;
    const Dataset ds = generate_synthetic_dataset(cfg);
    Rng rng(10);
    std::set<std::pair<std::string, std::string>> seen;
    for (int round = 0; round < 1000; ++round) {
        const Batch b = sample_batch_unsynchronized(ds, 2, 1, rng);
        for (const auto& p : b.pairs) seen.insert({p.utterance_id_audio, p.utterance_id_visual});
    }
    // 3 utterances admit exactly 6 ordered (audio, visual) pairs.
    CHECK(seen.size() == 6);
}

TEST_CASE("single-utterance speakers fall back to synchronized pairs with a flag") {
    Dataset ds;
    ds.speakers.push_back({"solo",
                           {{"u0", std::vector<double>(kAudioDim, 0.1),
                             std::vector<double>(kVisualDim, 0.1)}},
                           std::nullopt});
    ds.speakers.push_back({"duo",
                           {{"u0", std::vector<double>(kAudioDim, 0.2),
                             std::vector<double>(kVisualDim, 0.2)},
                            {"u1", std::vector<double>(kAudioDim, 0.3),
                             std::vector<double>(kVisualDim, 0.3)}},
                           std::nullopt});
    ds.build_index();
    Rng rng(4);
    const Batch b = sample_batch_unsynchronized(ds, 2, 2, rng);
    for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t i = 0; i < 2; ++i) {
            const auto& p = b.at(j, i);
            if (p.speaker_id == "solo") {
                CHECK(p.utterance_id_audio == p.utterance_id_visual);
                CHECK(b.sync_fallback[j * 2 + i] == 1);
            } else {
                CHECK(p.utterance_id_audio != p.utterance_id_visual);
                CHECK(b.sync_fallback[j * 2 + i] == 0);
            }
        }
}

TEST_CASE("synchronized sampler pairs identical ids, deterministic in seed") {
    SynthConfig cfg;
    cfg.n_speakers = 6;
    cfg.utterances_per_speaker = 4;
    const Dataset ds = generate_synthetic_dataset(cfg);

    Rng r1(42), r2(42);
    const Batch a = sample_batch_synchronized(ds, 4, 3, r1);
    const Batch b = sample_batch_synchronized(ds, 4, 3, r2);
    REQUIRE(a.n == 4);
    REQUIRE(a.m == 3);
    REQUIRE(a.pairs.size() == 12);
    std::set<std::string> speakers;
    for (std::size_t i = 0; i < a.pairs.size(); ++i) {
        CHECK(a.pairs[i].utterance_id_audio == a.pairs[i].utterance_id_visual);
        CHECK(a.pairs[i].speaker_id == b.pairs[i].speaker_id);
        CHECK(a.pairs[i].utterance_id_audio == b.pairs[i].utterance_id_audio);
        speakers.insert(a.pairs[i].speaker_id);
    }
    CHECK(speakers.size() == 4);  // N distinct speakers

    CHECK_THROWS_AS(sample_batch_synchronized(ds, 7, 2, r1), std::invalid_argument);
}

TEST_CASE("apply_corruption modes") {
    UtterancePair pair;
    pair.speaker_id = "s";
    pair.utterance_id_audio = pair.utterance_id_visual = "u";
    pair.audio_emb.assign(kAudioDim, 0.5);
    pair.visual_emb.assign(kVisualDim, -0.25);
    Rng rng(1);

    const auto clean = apply_corruption(pair, {Modality::Audio, CorruptionMode::Clean, 0.0}, rng);
    CHECK(clean.audio_emb == pair.audio_emb);
    CHECK(clean.visual_emb == pair.visual_emb);

    const auto missing =
        apply_corruption(pair, {Modality::Audio, CorruptionMode::Missing, 0.0}, rng);
    for (double v : missing.audio_emb) CHECK(v == 0.0);
    CHECK(missing.visual_emb == pair.visual_emb);  // untouched modality bit-exact

    const auto zero_noise =
        apply_corruption(pair, {Modality::Visual, CorruptionMode::Awgn, 0.0}, rng);
    CHECK(zero_noise.visual_emb == pair.visual_emb);
    CHECK(zero_noise.audio_emb == pair.audio_emb);

    const auto noisy = apply_corruption(pair, {Modality::Visual, CorruptionMode::Awgn, 0.3}, rng);
    CHECK(noisy.audio_emb == pair.audio_emb);
    CHECK(noisy.visual_emb != pair.visual_emb);
}

TEST_CASE("manifest round-trip preserves the dataset within float32 quantization") {
    SynthConfig cfg;
    cfg.n_speakers = 4;
    cfg.utterances_per_speaker = 2;
    cfg.label_coverage = 0.5;
    const Dataset ds = generate_synthetic_dataset(cfg);
    const fs::path dir = scratch_dir("roundtrip");
    const fs::path manifest = write_dataset(ds, dir);
    const Dataset loaded = load_embedding_manifest(manifest);

    REQUIRE(loaded.speakers.size() == ds.speakers.size());
    for (std::size_t s = 0; s < ds.speakers.size(); ++s) {
        CHECK(loaded.speakers[s].speaker_id == ds.speakers[s].speaker_id);
        REQUIRE(loaded.speakers[s].utterances.size() == ds.speakers[s].utterances.size());
        CHECK(loaded.speakers[s].age.has_value() == ds.speakers[s].age.has_value());
        if (ds.speakers[s].age)
            CHECK(*loaded.speakers[s].age == Catch::Approx(*ds.speakers[s].age).margin(1e-12));
        for (std::size_t u = 0; u < ds.speakers[s].utterances.size(); ++u)
            for (std::size_t i = 0; i < kAudioDim; ++i) {
                const double orig = ds.speakers[s].utterances[u].audio[i];
                const double back = loaded.speakers[s].utterances[u].audio[i];
                CHECK(back == static_cast<double>(static_cast<float>(orig)));
            }
    }
}

TEST_CASE("manifest loader reports precise errors") {
    const fs::path dir = scratch_dir("manifest_errors");

    SECTION("empty manifest gives empty dataset") {
        std::ofstream(dir / "m.csv") << "speaker_id,utterance_id,audio_path,visual_path,age\n";
        const Dataset ds = load_embedding_manifest(dir / "m.csv");
        CHECK(ds.speakers.empty());
    }

    SECTION("short audio blob names the offending line") {
        detail::write_f32_blob(dir / "short.f32", std::vector<double>(255, 0.0));
        detail::write_f32_blob(dir / "vis.f32", std::vector<double>(kVisualDim, 0.0));
        std::ofstream(dir / "m.csv") << "speaker_id,utterance_id,audio_path,visual_path,age\n"
                                     << "a,u0,short.f32,vis.f32,\n";
        CHECK_THROWS_WITH(load_embedding_manifest(dir / "m.csv"),
                          Catch::Matchers::ContainsSubstring("line 2"));
    }

    SECTION("missing blob file") {
        std::ofstream(dir / "m.csv") << "speaker_id,utterance_id,audio_path,visual_path,age\n"
                                     << "a,u0,nowhere.f32,nowhere.f32,\n";
        CHECK_THROWS_WITH(load_embedding_manifest(dir / "m.csv"),
                          Catch::Matchers::ContainsSubstring("missing blob"));
    }

    SECTION("duplicate key rejected with both line numbers") {
        detail::write_f32_blob(dir / "a.f32", std::vector<double>(kAudioDim, 0.0));
        detail::write_f32_blob(dir / "v.f32", std::vector<double>(kVisualDim, 0.0));
        std::ofstream(dir / "m.csv") << "speaker_id,utterance_id,audio_path,visual_path,age\n"
                                     << "a,u0,a.f32,v.f32,\n"
                                     << "a,u0,a.f32,v.f32,\n";
        CHECK_THROWS_WITH(load_embedding_manifest(dir / "m.csv"),
                          Catch::Matchers::ContainsSubstring("duplicate key"));
    }

    SECTION("malformed row") {
        std::ofstream(dir / "m.csv") << "speaker_id,utterance_id,audio_path,visual_path,age\n"
                                     << "a,u0,only_three_fields\n";
        CHECK_THROWS_WITH(load_embedding_manifest(dir / "m.csv"),
                          Catch::Matchers::ContainsSubstring("line 2"));
    }

    SECTION("age mapped through declared range") {
        detail::write_f32_blob(dir / "a.f32", std::vector<double>(kAudioDim, 0.0));
        detail::write_f32_blob(dir / "v.f32", std::vector<double>(kVisualDim, 0.0));
        std::ofstream(dir / "m.csv") << "# min_age=20\n# max_age=70\n"
                                     << "speaker_id,utterance_id,audio_path,visual_path,age\n"
                                     << "a,u0,a.f32,v.f32,45\n";
        const Dataset ds = load_embedding_manifest(dir / "m.csv");
        REQUIRE(ds.speakers.size() == 1);
        REQUIRE(ds.speakers[0].age.has_value());
        CHECK(*ds.speakers[0].age == Catch::Approx(0.5));
    }
}

TEST_CASE("trial list round-trip and balanced generation") {
    SynthConfig cfg;
    cfg.n_speakers = 8;
    cfg.utterances_per_speaker = 3;
    const Dataset ds = generate_synthetic_dataset(cfg);
    Rng rng(2);
    const TrialList trials = make_balanced_trials(ds, 40, rng);
    REQUIRE(trials.size() == 40);
    std::size_t targets = 0;
    for (const auto& t : trials) {
        REQUIRE(ds.find(t.enroll).has_value());
        REQUIRE(ds.find(t.test).has_value());
        const auto e = *ds.find(t.enroll);
        const auto x = *ds.find(t.test);
        if (t.label == 1) {
            ++targets;
            CHECK(e.first == x.first);
            CHECK(e.second != x.second);
        } else {
            CHECK(e.first != x.first);
        }
    }
    CHECK(targets == 20);

    const fs::path dir = scratch_dir("trials");
    save_trials(trials, dir / "t.txt");
    const TrialList loaded = load_trials(dir / "t.txt");
    REQUIRE(loaded.size() == trials.size());
    for (std::size_t i = 0; i < trials.size(); ++i) {
        CHECK(loaded[i].label == trials[i].label);
        CHECK(loaded[i].enroll == trials[i].enroll);
        CHECK(loaded[i].test == trials[i].test);
    }
}

TEST_CASE("speaker split is disjoint and seed-stable") {
    SynthConfig cfg;
    cfg.n_speakers = 10;
    cfg.utterances_per_speaker = 2;
    const Dataset ds = generate_synthetic_dataset(cfg);
    Rng r1(5), r2(5);
    const auto [train1, hold1] = split_speakers(ds, 3, r1);
    const auto [train2, hold2] = split_speakers(ds, 3, r2);
    CHECK(train1.speakers.size() == 7);
    CHECK(hold1.speakers.size() == 3);
    std::set<std::string> ids;
    for (const auto& s : train1.speakers) ids.insert(s.speaker_id);
    for (const auto& s : hold1.speakers) CHECK(ids.count(s.speaker_id) == 0);
    for (std::size_t i = 0; i < hold1.speakers.size(); ++i)
        CHECK(hold1.speakers[i].speaker_id == hold2.speakers[i].speaker_id);
}
