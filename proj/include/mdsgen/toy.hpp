#pragma once

#include <vector>

#include "mdsgen/audio.hpp"
#include "mdsgen/tensor.hpp"

namespace mds {

// Synthetic paired dataset: each clip carries one class; tone bursts at that
// class's mel bin appear in the audio, and the per-frame features switch from
// a shared background embedding to the class embedding during events.
struct ToySpec {
    int num_classes = 4;
    int events_per_clip = 2;
    int feature_frames = 32;   // L_V
    int feat_dim = 512;
    float feature_noise = 0.05f;
    // event length is chosen so the two events cover most of the clip: the
    // silent gap total (8 frames) is much shorter than one event window, so any
    // labeled window overlaps generated tone regardless of sampled placement
    int event_len = 28;        // in mel frames
    MelConfig mel = MelConfig::toy();
    int mel_frames = 64;
    uint64_t embed_seed = 0xC0FFEEULL;  // fixes class/background embeddings

    void validate() const {
        if (num_classes < 2) throw ConfigError("ToySpec: need at least 2 classes");
        if (events_per_clip < 1) throw ConfigError("ToySpec: need at least 1 event");
        if (events_per_clip * event_len > mel_frames)
            throw ConfigError("ToySpec: events cannot be placed without overlap");
    }

    // tone bins spread across the mel axis, one per class
    std::vector<int> class_bins() const {
        std::vector<int> bins(num_classes);
        for (int k = 0; k < num_classes; ++k)
            bins[k] = (int)((k + 1) * (long long)mel.mel_bins / (num_classes + 1));
        return bins;
    }

    // tone frequency = filter center of the class bin, so the bin argmax is exact
    std::vector<double> class_freqs() const {
        auto centers = audio_detail::mel_centers(mel);
        std::vector<double> f;
        for (int b : class_bins()) f.push_back(centers[b]);
        return f;
    }

    // K class embeddings (orthonormalized) + 1 background embedding
    std::vector<std::vector<float>> embeddings() const {
        Rng rng(embed_seed);
        std::vector<std::vector<float>> e(num_classes + 1, std::vector<float>(feat_dim));
        for (auto& v : e)
            for (auto& x : v) x = (float)rng.normal();
        // Gram-Schmidt over the class rows
        for (int i = 0; i < num_classes; ++i) {
            for (int j = 0; j < i; ++j) {
                double dot = 0.0;
                for (int k = 0; k < feat_dim; ++k) dot += (double)e[i][k] * e[j][k];
                for (int k = 0; k < feat_dim; ++k) e[i][k] -= (float)(dot * e[j][k]);
            }
            double n = 0.0;
            for (int k = 0; k < feat_dim; ++k) n += (double)e[i][k] * e[i][k];
            n = std::sqrt(n);
            for (int k = 0; k < feat_dim; ++k) e[i][k] /= (float)n;
        }
        double n = 0.0;
        for (int k = 0; k < feat_dim; ++k) n += (double)e[num_classes][k] * e[num_classes][k];
        n = std::sqrt(n);
        for (int k = 0; k < feat_dim; ++k) e[num_classes][k] /= (float)n;
        return e;
    }
};

struct ToyEvent {
    int cls = 0;
    int frame_begin = 0;  // mel frames, [begin, end)
    int frame_end = 0;
};

struct ToyPair {
    int cls = 0;
    TensorPtr features;  // [L_V, 512]
    MelSpectrogram mel;
    std::vector<ToyEvent> events;
};

namespace toy_detail {

// place `count` non-overlapping windows of `len` uniformly in [0, total)
inline std::vector<int> place_events(int total, int len, int count, Rng& rng) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::vector<int> starts;
        bool ok = true;
        for (int i = 0; i < count && ok; ++i) {
            int s = (int)rng.randint(total - len + 1);
            for (int p : starts)
                if (s < p + len && p < s + len) { ok = false; break; }
            if (ok) starts.push_back(s);
        }
        if (ok) return starts;
    }
    throw ConfigError("toy: cannot place non-overlapping events");
}

}  // namespace toy_detail

inline ToyPair generate_pair(const ToySpec& spec, int cls, Rng& rng) {
    spec.validate();
    ToyPair pair;
    pair.cls = cls;
    auto freqs = spec.class_freqs();
    auto starts = toy_detail::place_events(spec.mel_frames, spec.event_len,
                                           spec.events_per_clip, rng);
    // synthesize the waveform: silence with tone bursts
    Waveform w;
    w.sample_rate = spec.mel.sample_rate;
    int n = spec.mel.samples_for_frames(spec.mel_frames);
    w.samples.assign(n, 0.0f);
    for (int s : starts) {
        pair.events.push_back({cls, s, s + spec.event_len});
        int i0 = s * spec.mel.hop;
        int i1 = std::min(n, (s + spec.event_len - 1) * spec.mel.hop + spec.mel.n_fft);
        double f = freqs[cls];
        for (int i = i0; i < i1; ++i)
            w.samples[i] = 0.5f * (float)std::sin(2.0 * M_PI * f * i / w.sample_rate);
    }
    pair.mel = wav_to_mel(w, spec.mel);

    // features: background embedding everywhere, class embedding during events
    auto emb = spec.embeddings();
    pair.features = Tensor::create({spec.feature_frames, spec.feat_dim});
    double scale = (double)spec.feature_frames / spec.mel_frames;
    for (int fr = 0; fr < spec.feature_frames; ++fr) {
        int mel_frame = (int)(fr / scale);
        bool active = false;
        for (auto& e : pair.events)
            if (mel_frame >= e.frame_begin && mel_frame < e.frame_end) active = true;
        const auto& src = active ? emb[cls] : emb[spec.num_classes];
        for (int k = 0; k < spec.feat_dim; ++k)
            pair.features->data[(size_t)fr * spec.feat_dim + k] =
                src[k] + (float)(rng.normal() * spec.feature_noise);
    }
    return pair;
}

inline std::vector<ToyPair> generate_dataset(const ToySpec& spec, int n, Rng& rng) {
    if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");
    std::vector<ToyPair> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i)
        out.push_back(generate_pair(spec, (int)rng.randint(spec.num_classes), rng));
    return out;
}

// ---------------------------------------------------------------- the oracle

// dominant mel bin within a frame window: argmax of mean normalized value
// dominant = most accumulated linear power over the window; normalized values
// map back to dB as (v+1)*40-80 before the power sum, so loud frames dominate
// silence instead of averaging away in log space
inline int dominant_bin(const MelSpectrogram& mel, int f0, int f1) {
    int best = 0;
    double bestv = -1e30;
    f1 = std::min(f1, mel.frames);
    for (int b = 0; b < mel.bins; ++b) {
        double acc = 0.0;
        for (int f = f0; f < f1; ++f)
            acc += std::pow(10.0, ((mel.at(b, f) + 1.0) * 40.0 - 80.0) / 10.0);
        if (acc > bestv) { bestv = acc; best = b; }
    }
    return best;
}

struct AlignmentResult {
    std::vector<bool> hits;
    double accuracy = 0.0;
};

inline AlignmentResult oracle_alignment(const MelSpectrogram& mel,
                                        const std::vector<ToyEvent>& events,
                                        const ToySpec& spec) {
    if (events.empty()) throw ConfigError("oracle_alignment: no labels");
    auto bins = spec.class_bins();
    AlignmentResult r;
    int hits = 0;
    for (auto& e : events) {
        bool hit = dominant_bin(mel, e.frame_begin, e.frame_end) == bins[e.cls];
        r.hits.push_back(hit);
        hits += hit;
    }
    r.accuracy = (double)hits / (double)events.size();
    return r;
}

// oracle class probabilities: softmax over per-class event-window energies,
// measured on the class tone bins across the whole clip
inline std::vector<double> oracle_class_probs(const MelSpectrogram& mel, const ToySpec& spec) {
    auto bins = spec.class_bins();
    std::vector<double> energy(spec.num_classes, 0.0);
    for (int k = 0; k < spec.num_classes; ++k)
        for (int f = 0; f < mel.frames; ++f) energy[k] += mel.at(bins[k], f);
    double mx = energy[0];
    for (double e : energy) mx = std::max(mx, e);
    double z = 0.0;
    std::vector<double> p(spec.num_classes);
    for (int k = 0; k < spec.num_classes; ++k) {
        p[k] = std::exp(energy[k] - mx);
        z += p[k];
    }
    for (auto& v : p) v /= z;
    return p;
}

}  // namespace mds
