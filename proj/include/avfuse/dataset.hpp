#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "avfuse/matrix.hpp"
#include "avfuse/nn.hpp"
#include "avfuse/rng.hpp"

namespace avfuse {

inline constexpr std::size_t kAudioDim = 256;
inline constexpr std::size_t kVisualDim = 512;

// ---- records ----

struct Utterance {
    std::string id;
    std::vector<double> audio;   // kAudioDim
    std::vector<double> visual;  // kVisualDim
};

struct SpeakerRecord {
    std::string speaker_id;
    std::vector<Utterance> utterances;
    std::optional<double> age;  // normalized to [0, 1]
};

/// Key used in trial lists and manifests to address one utterance.
inline std::string utterance_key(const std::string& speaker_id, const std::string& utt_id) {
    return speaker_id + "/" + utt_id;
}

struct Dataset {
    std::vector<SpeakerRecord> speakers;

    std::size_t total_utterances() const {
        std::size_t n = 0;
        for (const auto& s : speakers) n += s.utterances.size();
        return n;
    }

    void build_index() {
        index_.clear();
        for (std::size_t si = 0; si < speakers.size(); ++si)
            for (std::size_t ui = 0; ui < speakers[si].utterances.size(); ++ui)
                index_[utterance_key(speakers[si].speaker_id, speakers[si].utterances[ui].id)] = {
                    si, ui};
    }

    /// Resolves "speaker/utterance"; nullopt if unknown.
    std::optional<std::pair<std::size_t, std::size_t>> find(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    const Utterance& utterance(std::pair<std::size_t, std::size_t> loc) const {
        return speakers[loc.first].utterances[loc.second];
    }

private:
    std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> index_;
};

// ---- synthetic generation ----

struct SynthConfig {
    std::size_t n_speakers = 50;
    std::size_t utterances_per_speaker = 10;
    double intra_spread = 0.05;
    double label_coverage = 0.8;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_speakers < 2) throw std::invalid_argument("SynthConfig: n_speakers must be >= 2");
        if (utterances_per_speaker < 2)
            throw std::invalid_argument("SynthConfig: utterances_per_speaker must be >= 2");
        if (intra_spread < 0.0) throw std::invalid_argument("SynthConfig: intra_spread < 0");
        if (label_coverage < 0.0 || label_coverage > 1.0)
            throw std::invalid_argument("SynthConfig: label_coverage outside [0,1]");
    }
};

namespace detail {

inline std::vector<double> random_unit_vector(std::size_t dim, Rng& rng) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    return l2_normalize(v);
}

}  // namespace detail

/// Speakers are anchor directions on the audio/visual unit spheres; each
/// utterance is the anchor plus isotropic noise, re-normalized. Age labels
/// (when assigned) are a squashed fixed random projection of the anchors plus
/// noise, so they carry learnable signal.
inline Dataset generate_synthetic_dataset(const SynthConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    Rng proj_rng = root.split(0);
    Rng speaker_rng = root.split(1);
    Rng label_rng = root.split(2);

    std::vector<double> age_projection(kAudioDim + kVisualDim);
    for (double& x : age_projection) x = proj_rng.normal();

    Dataset ds;
    ds.speakers.resize(cfg.n_speakers);
    for (std::size_t si = 0; si < cfg.n_speakers; ++si) {
        SpeakerRecord& rec = ds.speakers[si];
        char buf[16];
        std::snprintf(buf, sizeof buf, "spk%04zu", si);
        rec.speaker_id = buf;

        const std::vector<double> audio_anchor = detail::random_unit_vector(kAudioDim, speaker_rng);
        const std::vector<double> visual_anchor =
            detail::random_unit_vector(kVisualDim, speaker_rng);

        rec.utterances.resize(cfg.utterances_per_speaker);
        for (std::size_t ui = 0; ui < cfg.utterances_per_speaker; ++ui) {
            Utterance& utt = rec.utterances[ui];
            std::snprintf(buf, sizeof buf, "utt%03zu", ui);
            utt.id = buf;
            utt.audio = audio_anchor;
            utt.visual = visual_anchor;
            for (double& x : utt.audio) x += cfg.intra_spread * speaker_rng.normal();
            for (double& x : utt.visual) x += cfg.intra_spread * speaker_rng.normal();
            utt.audio = l2_normalize(utt.audio);
            utt.visual = l2_normalize(utt.visual);
        }

        double raw = 0.0;
        for (std::size_t i = 0; i < kAudioDim; ++i) raw += age_projection[i] * audio_anchor[i];
        for (std::size_t i = 0; i < kVisualDim; ++i)
            raw += age_projection[kAudioDim + i] * visual_anchor[i];
        rec.age = sigmoid(1.2 * (raw + 0.25 * speaker_rng.normal()));
    }

    // Keep labels on a random subset of round(coverage * n) speakers.
    std::vector<std::size_t> order(cfg.n_speakers);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    label_rng.shuffle(order);
    const std::size_t n_labeled =
        static_cast<std::size_t>(cfg.label_coverage * static_cast<double>(cfg.n_speakers) + 0.5);
    for (std::size_t i = n_labeled; i < order.size(); ++i) ds.speakers[order[i]].age.reset();

    ds.build_index();
    return ds;
}

// ---- batching ----

struct UtterancePair {
    std::string speaker_id;
    std::string utterance_id_audio;
    std::string utterance_id_visual;
    std::vector<double> audio_emb;
    std::vector<double> visual_emb;
};

/// N speakers x M utterance slots, row-major (speaker j, slot i) at j*M+i.
struct Batch {
    std::size_t n = 0;
    std::size_t m = 0;
    std::vector<UtterancePair> pairs;
    std::vector<std::optional<double>> age_labels;  // per speaker
    std::vector<std::uint8_t> sync_fallback;        // per pair: forced synchronized

    const UtterancePair& at(std::size_t j, std::size_t i) const { return pairs[j * m + i]; }
};

namespace detail {

enum class PairingPolicy { Unsynchronized, Synchronized };

inline Batch sample_batch(const Dataset& ds, std::size_t n, std::size_t m, Rng& rng,
                          PairingPolicy policy) {
    if (ds.speakers.size() < n)
        throw std::invalid_argument("sample_batch: dataset has " +
                                    std::to_string(ds.speakers.size()) + " speakers, need " +
                                    std::to_string(n));
    if (n < 1 || m < 1) throw std::invalid_argument("sample_batch: n and m must be positive");

    std::vector<std::size_t> order(ds.speakers.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    Batch batch;
    batch.n = n;
    batch.m = m;
    batch.pairs.reserve(n * m);
    batch.sync_fallback.reserve(n * m);
    for (std::size_t j = 0; j < n; ++j) {
        const SpeakerRecord& rec = ds.speakers[order[j]];
        batch.age_labels.push_back(rec.age);
        const std::size_t k = rec.utterances.size();
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t a_idx = rng.uniform_index(k);
            std::size_t v_idx = a_idx;
            bool fallback = false;
            if (policy == PairingPolicy::Unsynchronized) {
                if (k >= 2) {
                    v_idx = rng.uniform_index(k - 1);
                    if (v_idx >= a_idx) ++v_idx;
                } else {
                    fallback = true;
                }
            }
            UtterancePair pair;
            pair.speaker_id = rec.speaker_id;
            pair.utterance_id_audio = rec.utterances[a_idx].id;
            pair.utterance_id_visual = rec.utterances[v_idx].id;
            pair.audio_emb = rec.utterances[a_idx].audio;
            pair.visual_emb = rec.utterances[v_idx].visual;
            batch.pairs.push_back(std::move(pair));
            batch.sync_fallback.push_back(fallback ? 1 : 0);
        }
    }
    return batch;
}

}  // namespace detail

/// Audio and visual drawn from different utterances of the same speaker
/// whenever that speaker has at least two; single-utterance speakers fall
/// back to a synchronized pair and are flagged.
inline Batch sample_batch_unsynchronized(const Dataset& ds, std::size_t n, std::size_t m,
                                         Rng& rng) {
    return detail::sample_batch(ds, n, m, rng, detail::PairingPolicy::Unsynchronized);
}

inline Batch sample_batch_synchronized(const Dataset& ds, std::size_t n, std::size_t m, Rng& rng) {
    return detail::sample_batch(ds, n, m, rng, detail::PairingPolicy::Synchronized);
}

// ---- modality corruption ----

enum class Modality { Audio, Visual };
enum class CorruptionMode { Clean, Missing, Awgn };

struct CorruptionSpec {
    Modality modality = Modality::Audio;
    CorruptionMode mode = CorruptionMode::Clean;
    double sigma = 0.0;  // awgn only
};

inline UtterancePair apply_corruption(const UtterancePair& pair, const CorruptionSpec& spec,
                                      Rng& rng) {
    UtterancePair out = pair;
    if (spec.mode == CorruptionMode::Clean) return out;
    std::vector<double>& target = spec.modality == Modality::Audio ? out.audio_emb : out.visual_emb;
    if (spec.mode == CorruptionMode::Missing) {
        std::fill(target.begin(), target.end(), 0.0);
    } else {
        for (double& x : target) x += spec.sigma * rng.normal();
    }
    return out;
}

// ---- manifest + blob I/O ----
//
// Manifest: UTF-8 CSV with header `speaker_id,utterance_id,audio_path,visual_path,age`
// (age blank if unknown); optional leading `# min_age=..` / `# max_age=..`
// comment lines declare the linear mapping of the age column onto [0,1].
// Blobs: raw little-endian float32, exactly 256 (audio) or 512 (visual)
// values per file, paths relative to the manifest.

namespace detail {

inline void write_f32_blob(const std::filesystem::path& path, const std::vector<double>& values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write blob: " + path.string());
    for (double v : values) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        const unsigned char bytes[4] = {
            static_cast<unsigned char>(bits & 0xff),
            static_cast<unsigned char>((bits >> 8) & 0xff),
            static_cast<unsigned char>((bits >> 16) & 0xff),
            static_cast<unsigned char>((bits >> 24) & 0xff),
        };
        out.write(reinterpret_cast<const char*>(bytes), 4);
    }
}

inline std::vector<double> read_f32_blob(const std::filesystem::path& path,
                                         std::size_t expected_dim, std::size_t line_no) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                 ": missing blob file " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() != expected_dim * 4)
        throw std::runtime_error("manifest line " + std::to_string(line_no) + ": blob " +
                                 path.string() + " holds " + std::to_string(bytes.size() / 4) +
                                 " floats, expected " + std::to_string(expected_dim));
    std::vector<double> values(expected_dim);
    for (std::size_t i = 0; i < expected_dim; ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(bytes[4 * i]) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
        values[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    return values;
}

inline std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

}  // namespace detail

/// Writes manifest.csv plus one audio and one visual blob per utterance under
/// <dir>/blobs/. Returns the manifest path.
inline std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "blobs");
    const std::filesystem::path manifest_path = dir / "manifest.csv";
    std::ofstream out(manifest_path);
    if (!out) throw std::runtime_error("cannot write manifest: " + manifest_path.string());
    out << "speaker_id,utterance_id,audio_path,visual_path,age\n";
    char age_buf[32];
    for (const auto& spk : ds.speakers) {
        for (const auto& utt : spk.utterances) {
            const std::string stem = spk.speaker_id + "__" + utt.id;
            const std::string audio_rel = "blobs/" + stem + "__audio.f32";
            const std::string visual_rel = "blobs/" + stem + "__visual.f32";
            detail::write_f32_blob(dir / audio_rel, utt.audio);
            detail::write_f32_blob(dir / visual_rel, utt.visual);
            out << spk.speaker_id << ',' << utt.id << ',' << audio_rel << ',' << visual_rel << ',';
            if (spk.age) {
                std::snprintf(age_buf, sizeof age_buf, "%.17g", *spk.age);
                out << age_buf;
            }
            out << '\n';
        }
    }
    return manifest_path;
}

inline Dataset load_embedding_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path.string());
    const std::filesystem::path base = manifest_path.parent_path();

    Dataset ds;
    std::unordered_map<std::string, std::size_t> speaker_index;
    std::unordered_map<std::string, std::size_t> seen_keys;  // key -> line introduced

    double min_age = 0.0, max_age = 1.0;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            // Header comments may declare the age normalization range.
            std::size_t eq = line.find('=');
            if (eq != std::string::npos) {
                std::string key = line.substr(1, eq - 1);
                key.erase(0, key.find_first_not_of(" \t"));
                key.erase(key.find_last_not_of(" \t") + 1);
                const std::string value = line.substr(eq + 1);
                try {
                    if (key == "min_age") min_age = std::stod(value);
                    if (key == "max_age") max_age = std::stod(value);
                } catch (const std::exception&) {
                    throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                             ": bad numeric value in header comment");
                }
            }
            continue;
        }
        if (!header_seen) {
            if (line != "speaker_id,utterance_id,audio_path,visual_path,age")
                throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                         ": unexpected header row");
            header_seen = true;
            continue;
        }
        const auto fields = detail::split_csv_row(line);
        if (fields.size() != 5)
            throw std::runtime_error("manifest line " + std::to_string(line_no) + ": expected 5 " +
                                     "fields, got " + std::to_string(fields.size()));
        const std::string& speaker_id = fields[0];
        const std::string& utt_id = fields[1];
        if (speaker_id.empty() || utt_id.empty())
            throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                     ": empty speaker or utterance id");
        const std::string key = utterance_key(speaker_id, utt_id);
        if (auto it = seen_keys.find(key); it != seen_keys.end())
            throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                     ": duplicate key '" + key + "' (first seen on line " +
                                     std::to_string(it->second) + ")");
        seen_keys[key] = line_no;

        Utterance utt;
        utt.id = utt_id;
        utt.audio = detail::read_f32_blob(base / fields[2], kAudioDim, line_no);
        utt.visual = detail::read_f32_blob(base / fields[3], kVisualDim, line_no);

        std::size_t si;
        if (auto it = speaker_index.find(speaker_id); it != speaker_index.end()) {
            si = it->second;
        } else {
            si = ds.speakers.size();
            speaker_index[speaker_id] = si;
            ds.speakers.push_back(SpeakerRecord{speaker_id, {}, std::nullopt});
        }
        ds.speakers[si].utterances.push_back(std::move(utt));

        if (!fields[4].empty()) {
            double age;
            try {
                age = std::stod(fields[4]);
            } catch (const std::exception&) {
                throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                         ": unparseable age '" + fields[4] + "'");
            }
            if (max_age > min_age) age = (age - min_age) / (max_age - min_age);
            if (age < 0.0 || age > 1.0)
                throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                         ": age outside declared [min_age, max_age] range");
            if (ds.speakers[si].age && std::abs(*ds.speakers[si].age - age) > 1e-12)
                throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                         ": conflicting age for speaker '" + speaker_id + "'");
            ds.speakers[si].age = age;
        }
    }
    if (!header_seen && line_no > 0)
        throw std::runtime_error("manifest: no header row found");
    ds.build_index();
    return ds;
}

// ---- trial lists ----

/// One verification trial: label 1 = same speaker (target), 0 = nontarget.
struct Trial {
    int label = 0;
    std::string enroll;  // utterance key
    std::string test;
};

using TrialList = std::vector<Trial>;

inline TrialList load_trials(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trial list: " + path.string());
    TrialList trials;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        Trial t;
        if (!(ss >> t.label >> t.enroll >> t.test) || (t.label != 0 && t.label != 1))
            throw std::runtime_error("trial list line " + std::to_string(line_no) +
                                     ": expected 'label enroll test' with label in {0,1}");
        trials.push_back(std::move(t));
    }
    return trials;
}

inline void save_trials(const TrialList& trials, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trial list: " + path.string());
    for (const auto& t : trials) out << t.label << ' ' << t.enroll << ' ' << t.test << '\n';
}

/// Balanced target/nontarget trials over the given dataset. Targets pair two
/// distinct utterances of one speaker; nontargets pair utterances of two
/// distinct speakers.
inline TrialList make_balanced_trials(const Dataset& ds, std::size_t n_trials, Rng& rng) {
    if (ds.speakers.size() < 2)
        throw std::invalid_argument("make_balanced_trials: need at least 2 speakers");
    std::vector<std::size_t> multi;  // speakers with >= 2 utterances
    for (std::size_t i = 0; i < ds.speakers.size(); ++i)
        if (ds.speakers[i].utterances.size() >= 2) multi.push_back(i);
    if (multi.empty())
        throw std::invalid_argument("make_balanced_trials: no speaker has 2 utterances");

    auto key_of = [&](std::size_t si, std::size_t ui) {
        return utterance_key(ds.speakers[si].speaker_id, ds.speakers[si].utterances[ui].id);
    };

    TrialList trials;
    trials.reserve(n_trials);
    for (std::size_t i = 0; i < n_trials / 2; ++i) {
        const std::size_t si = multi[rng.uniform_index(multi.size())];
        const std::size_t k = ds.speakers[si].utterances.size();
        const std::size_t u1 = rng.uniform_index(k);
        std::size_t u2 = rng.uniform_index(k - 1);
        if (u2 >= u1) ++u2;
        trials.push_back({1, key_of(si, u1), key_of(si, u2)});
    }
    while (trials.size() < n_trials) {
        const std::size_t s1 = rng.uniform_index(ds.speakers.size());
        std::size_t s2 = rng.uniform_index(ds.speakers.size() - 1);
        if (s2 >= s1) ++s2;
        const std::size_t u1 = rng.uniform_index(ds.speakers[s1].utterances.size());
        const std::size_t u2 = rng.uniform_index(ds.speakers[s2].utterances.size());
        trials.push_back({0, key_of(s1, u1), key_of(s2, u2)});
    }
    return trials;
}

/// Deterministic split that moves `holdout_count` randomly chosen speakers
/// into the second dataset (validation / test).
inline std::pair<Dataset, Dataset> split_speakers(const Dataset& ds, std::size_t holdout_count,
                                                  Rng& rng) {
    if (holdout_count >= ds.speakers.size())
        throw std::invalid_argument("split_speakers: holdout would consume the whole dataset");
    std::vector<std::size_t> order(ds.speakers.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<bool> held(ds.speakers.size(), false);
    for (std::size_t i = 0; i < holdout_count; ++i) held[order[i]] = true;
    Dataset train, holdout;
    for (std::size_t i = 0; i < ds.speakers.size(); ++i)
        (held[i] ? holdout : train).speakers.push_back(ds.speakers[i]);
    train.build_index();
    holdout.build_index();
    return {std::move(train), std::move(holdout)};
}

}  // namespace avfuse
