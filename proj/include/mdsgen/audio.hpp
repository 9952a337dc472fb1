#pragma once

#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "mdsgen/errors.hpp"
#include "mdsgen/rng.hpp"

namespace mds {

struct Waveform {
    std::vector<float> samples;  // [-1, 1]
    int sample_rate = 16000;
};

struct MelConfig {
    int sample_rate = 16000;
    int n_fft = 512;  // also the window length (Hann)
    int hop = 128;
    int mel_bins = 16;

    // toy preset: 16x64 from one second of audio-ish input
    static MelConfig toy() { return MelConfig{}; }
    // full-scale preset: 128x512 from ~8.2 s
    static MelConfig full() { return MelConfig{16000, 1024, 256, 128}; }

    int freq_bins() const { return n_fft / 2 + 1; }
    // samples needed for exactly `frames` analysis frames
    int samples_for_frames(int frames) const { return (frames - 1) * hop + n_fft; }
};

// log-mel matrix normalized to [-1, 1]; row-major bins x frames
struct MelSpectrogram {
    int bins = 0, frames = 0;
    std::vector<float> values;

    MelSpectrogram() = default;
    MelSpectrogram(int b, int f) : bins(b), frames(f), values((size_t)b * f, 0.0f) {}
    float& at(int b, int f) { return values[(size_t)b * frames + f]; }
    float at(int b, int f) const { return values[(size_t)b * frames + f]; }
};

// three stacked planes; identical on the encode path
struct RgbMel {
    int bins = 0, frames = 0;
    std::vector<float> values;  // 3 x bins x frames

    RgbMel() = default;
    RgbMel(int b, int f) : bins(b), frames(f), values((size_t)3 * b * f, 0.0f) {}
    float& at(int c, int b, int f) { return values[((size_t)c * bins + b) * frames + f]; }
    float at(int c, int b, int f) const { return values[((size_t)c * bins + b) * frames + f]; }
};

namespace audio_detail {

// iterative radix-2 FFT, in place
inline void fft(std::vector<std::complex<double>>& a, bool inverse) {
    size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw ValueError("fft: size must be a power of two");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * M_PI / (double)len * (inverse ? 1.0 : -1.0);
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                auto u = a[i + j], v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= (double)n;
}

inline std::vector<double> hann(int n) {
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n);
    return w;
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// triangular filterbank [mel_bins, n_fft/2+1], HTK mel scale over [0, sr/2]
inline std::vector<double> mel_filterbank(const MelConfig& cfg) {
    int nb = cfg.freq_bins();
    std::vector<double> fb((size_t)cfg.mel_bins * nb, 0.0);
    double mmax = hz_to_mel(cfg.sample_rate / 2.0);
    std::vector<double> pts(cfg.mel_bins + 2);
    for (int i = 0; i < cfg.mel_bins + 2; ++i)
        pts[i] = mel_to_hz(mmax * i / (cfg.mel_bins + 1));
    for (int m = 0; m < cfg.mel_bins; ++m) {
        double lo = pts[m], c = pts[m + 1], hi = pts[m + 2];
        for (int k = 0; k < nb; ++k) {
            double f = (double)k * cfg.sample_rate / cfg.n_fft;
            double w = 0.0;
            if (f > lo && f < c)
                w = (f - lo) / (c - lo);
            else if (f >= c && f < hi)
                w = (hi - f) / (hi - c);
            fb[(size_t)m * nb + k] = w;
        }
    }
    return fb;
}

// filter center frequencies in Hz, one per mel bin
inline std::vector<double> mel_centers(const MelConfig& cfg) {
    double mmax = hz_to_mel(cfg.sample_rate / 2.0);
    std::vector<double> c(cfg.mel_bins);
    for (int m = 0; m < cfg.mel_bins; ++m)
        c[m] = mel_to_hz(mmax * (m + 1) / (cfg.mel_bins + 1));
    return c;
}

// analysis gain normalizing a full-scale sine to magnitude ~1 (0 dB)
inline double stft_gain(const MelConfig& cfg) {
    auto w = hann(cfg.n_fft);
    double s = 0.0;
    for (double v : w) s += v;
    return 2.0 / s;
}

// magnitude STFT: [freq_bins, frames], full scale normalized to ~1
inline std::vector<double> stft_mag(const std::vector<float>& x, const MelConfig& cfg,
                                    int& frames_out) {
    int win = cfg.n_fft;
    if ((int)x.size() < win) throw ValueError("stft: input shorter than one frame");
    int frames = (int)((x.size() - win) / cfg.hop) + 1;
    frames_out = frames;
    int nb = cfg.freq_bins();
    auto w = hann(win);
    double gain = stft_gain(cfg);
    std::vector<double> mag((size_t)nb * frames);
    std::vector<std::complex<double>> buf(win);
    for (int f = 0; f < frames; ++f) {
        const float* px = x.data() + (size_t)f * cfg.hop;
        for (int i = 0; i < win; ++i) buf[i] = {px[i] * w[i], 0.0};
        fft(buf, false);
        for (int k = 0; k < nb; ++k) mag[(size_t)k * frames + f] = gain * std::abs(buf[k]);
    }
    return mag;
}

constexpr double kLogFloor = 1e-5;
constexpr double kDbMin = -80.0, kDbMax = 0.0;

inline double mag_to_norm(double m) {
    double db = 20.0 * std::log10(std::max(m, kLogFloor));
    db = std::min(std::max(db, kDbMin), kDbMax);
    return (db - kDbMin) / (kDbMax - kDbMin) * 2.0 - 1.0;
}

inline double norm_to_mag(double v) {
    double db = (v + 1.0) / 2.0 * (kDbMax - kDbMin) + kDbMin;
    // the normalization floor is an information sink; decode it as true silence
    if (db <= kDbMin + 1e-4) return 0.0;
    return std::pow(10.0, db / 20.0);
}

}  // namespace audio_detail

// pre-normalization log-mel in dB, exposed for the constant-gain property test
inline std::vector<double> wav_to_logmel_db(const Waveform& w, const MelConfig& cfg,
                                            int& frames_out) {
    int frames = 0;
    auto mag = audio_detail::stft_mag(w.samples, cfg, frames);
    frames_out = frames;
    auto fb = audio_detail::mel_filterbank(cfg);
    int nb = cfg.freq_bins();
    std::vector<double> out((size_t)cfg.mel_bins * frames);
    for (int m = 0; m < cfg.mel_bins; ++m)
        for (int f = 0; f < frames; ++f) {
            double acc = 0.0;
            for (int k = 0; k < nb; ++k)
                acc += fb[(size_t)m * nb + k] * mag[(size_t)k * frames + f];
            out[(size_t)m * frames + f] =
                20.0 * std::log10(std::max(acc, audio_detail::kLogFloor));
        }
    return out;
}

inline MelSpectrogram wav_to_mel(const Waveform& w, const MelConfig& cfg) {
    for (float s : w.samples)
        if (!std::isfinite(s)) throw ValueError("wav_to_mel: non-finite sample");
    int frames = 0;
    auto db = wav_to_logmel_db(w, cfg, frames);
    MelSpectrogram mel(cfg.mel_bins, frames);
    for (size_t i = 0; i < db.size(); ++i) {
        double d = std::min(std::max(db[i], audio_detail::kDbMin), audio_detail::kDbMax);
        mel.values[i] =
            (float)((d - audio_detail::kDbMin) / (audio_detail::kDbMax - audio_detail::kDbMin) *
                        2.0 -
                    1.0);
    }
    return mel;
}

// Griffin-Lim phase reconstruction; residuals (spectral convergence per
// iteration) returned through `residuals` when non-null.
inline Waveform griffin_lim(const MelSpectrogram& mel, const MelConfig& cfg, int iters, Rng& rng,
                            std::vector<double>* residuals = nullptr) {
    if (iters < 1) throw ConfigError("griffin_lim: iters must be >= 1");
    int nb = cfg.freq_bins(), frames = mel.frames, win = cfg.n_fft;
    int out_len = cfg.samples_for_frames(frames);

    // mel -> linear magnitude via transposed filterbank with per-column
    // normalization (a cheap pseudo-inverse; the filterbank is near-orthogonal)
    auto fb = audio_detail::mel_filterbank(cfg);
    std::vector<double> colsum(nb, 0.0);
    for (int m = 0; m < cfg.mel_bins; ++m)
        for (int k = 0; k < nb; ++k) colsum[k] += fb[(size_t)m * nb + k];
    std::vector<double> target((size_t)nb * frames, 0.0);
    double total = 0.0;
    for (int k = 0; k < nb; ++k)
        for (int f = 0; f < frames; ++f) {
            double acc = 0.0;
            for (int m = 0; m < cfg.mel_bins; ++m)
                acc += fb[(size_t)m * nb + k] * audio_detail::norm_to_mag(mel.at(m, f));
            double v = colsum[k] > 1e-12 ? acc / colsum[k] : 0.0;
            target[(size_t)k * frames + f] = v;
            total += v;
        }
    Waveform out;
    out.sample_rate = cfg.sample_rate;
    out.samples.assign(out_len, 0.0f);
    if (residuals) residuals->clear();
    if (total == 0.0) {  // degenerate silent input
        if (residuals) residuals->assign(iters, 0.0);
        return out;
    }

    auto w = audio_detail::hann(win);
    std::vector<double> wsum(out_len, 0.0);
    for (int f = 0; f < frames; ++f)
        for (int i = 0; i < win; ++i) wsum[(size_t)f * cfg.hop + i] += w[i] * w[i];

    // random initial phase
    std::vector<double> phase((size_t)nb * frames);
    for (auto& p : phase) p = rng.uniform(-M_PI, M_PI);

    std::vector<double> x(out_len);
    std::vector<std::complex<double>> buf(win);
    double tnorm = 0.0;
    for (double v : target) tnorm += v * v;
    tnorm = std::sqrt(tnorm);

    for (int it = 0; it < iters; ++it) {
        // inverse STFT of target magnitude with current phase
        std::fill(x.begin(), x.end(), 0.0);
        for (int f = 0; f < frames; ++f) {
            for (int k = 0; k < nb; ++k) {
                double m = target[(size_t)k * frames + f], p = phase[(size_t)k * frames + f];
                buf[k] = std::polar(m, p);
            }
            for (int k = nb; k < win; ++k) buf[k] = std::conj(buf[win - k]);
            audio_detail::fft(buf, true);
            double* px = x.data() + (size_t)f * cfg.hop;
            for (int i = 0; i < win; ++i) px[i] += buf[i].real() * w[i];
        }
        for (int i = 0; i < out_len; ++i)
            if (wsum[i] > 1e-9) x[i] /= wsum[i];

        // re-analyze: new phase + convergence residual
        double rnum = 0.0;
        for (int f = 0; f < frames; ++f) {
            const double* px = x.data() + (size_t)f * cfg.hop;
            for (int i = 0; i < win; ++i) buf[i] = {px[i] * w[i], 0.0};
            audio_detail::fft(buf, false);
            for (int k = 0; k < nb; ++k) {
                phase[(size_t)k * frames + f] = std::arg(buf[k]);
                double d = std::abs(buf[k]) - target[(size_t)k * frames + f];
                rnum += d * d;
            }
        }
        if (residuals) residuals->push_back(std::sqrt(rnum) / tnorm);
    }
    float peak = 0.0f;
    for (double v : x) peak = std::max(peak, (float)std::abs(v));
    float g = peak > 1.0f ? 1.0f / peak : 1.0f;
    for (int i = 0; i < out_len; ++i) out.samples[i] = (float)x[i] * g;
    return out;
}

inline RgbMel replicate_channels(const MelSpectrogram& m) {
    RgbMel out(m.bins, m.frames);
    for (int c = 0; c < 3; ++c)
        std::copy(m.values.begin(), m.values.end(),
                  out.values.begin() + (size_t)c * m.values.size());
    return out;
}

enum class ChannelMode { R, G, B, Mean };

inline ChannelMode channel_mode_from_string(const std::string& s) {
    if (s == "R") return ChannelMode::R;
    if (s == "G") return ChannelMode::G;
    if (s == "B") return ChannelMode::B;
    if (s == "mean") return ChannelMode::Mean;
    throw ConfigError("unknown channel mode: " + s);
}

inline MelSpectrogram select_channel(const RgbMel& x, ChannelMode mode) {
    MelSpectrogram out(x.bins, x.frames);
    size_t plane = (size_t)x.bins * x.frames;
    if (mode == ChannelMode::Mean) {
        // double accumulation keeps mean-of-identical-planes exact
        for (size_t i = 0; i < plane; ++i)
            out.values[i] = (float)(((double)x.values[i] + x.values[plane + i] +
                                     x.values[2 * plane + i]) /
                                    3.0);
    } else {
        int c = mode == ChannelMode::R ? 0 : mode == ChannelMode::G ? 1 : 2;
        std::copy_n(x.values.begin() + (size_t)c * plane, plane, out.values.begin());
    }
    return out;
}

struct ChannelHistograms {
    int bins;
    std::vector<double> h[3];   // normalized, shared range
    double l1[3];               // pairwise L1: (0,1), (0,2), (1,2)
};

inline ChannelHistograms channel_histogram(const RgbMel& x, int bins) {
    if (bins < 2) throw ConfigError("channel_histogram: bins must be >= 2");
    ChannelHistograms out;
    out.bins = bins;
    float lo = x.values[0], hi = x.values[0];
    for (float v : x.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi <= lo) hi = lo + 1e-6f;
    size_t plane = (size_t)x.bins * x.frames;
    for (int c = 0; c < 3; ++c) {
        out.h[c].assign(bins, 0.0);
        for (size_t i = 0; i < plane; ++i) {
            float v = x.values[(size_t)c * plane + i];
            int b = std::min((int)((v - lo) / (hi - lo) * bins), bins - 1);
            out.h[c][b] += 1.0;
        }
        for (auto& v : out.h[c]) v /= (double)plane;
    }
    int pair = 0;
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b, ++pair) {
            double d = 0.0;
            for (int i = 0; i < bins; ++i) d += std::abs(out.h[a][i] - out.h[b][i]);
            out.l1[pair] = d;
        }
    return out;
}

// ------------------------------------------------------------------- WAV I/O
// PCM 16-bit mono little-endian, canonical 44-byte header.

inline void write_wav(const std::string& path, const Waveform& w) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    uint32_t n = (uint32_t)w.samples.size();
    uint32_t data_bytes = n * 2, sr = (uint32_t)w.sample_rate;
    uint32_t byte_rate = sr * 2;
    auto u32 = [&](uint32_t v) { f.write((const char*)&v, 4); };
    auto u16 = [&](uint16_t v) { f.write((const char*)&v, 2); };
    f.write("RIFF", 4);
    u32(36 + data_bytes);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    u32(16);
    u16(1);   // PCM
    u16(1);   // mono
    u32(sr);
    u32(byte_rate);
    u16(2);   // block align
    u16(16);  // bits
    f.write("data", 4);
    u32(data_bytes);
    for (float s : w.samples) {
        float c = std::min(std::max(s, -1.0f), 1.0f);
        int16_t q = (int16_t)std::lrint(c * 32767.0f);
        f.write((const char*)&q, 2);
    }
    if (!f) throw IoError("write failed: " + path);
}

inline Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char hdr[44];
    f.read(hdr, 44);
    if (!f || std::memcmp(hdr, "RIFF", 4) != 0 || std::memcmp(hdr + 8, "WAVE", 4) != 0)
        throw IoError("not a canonical WAV file: " + path);
    uint16_t fmt, channels, bits;
    uint32_t sr, data_bytes;
    std::memcpy(&fmt, hdr + 20, 2);
    std::memcpy(&channels, hdr + 22, 2);
    std::memcpy(&sr, hdr + 24, 4);
    std::memcpy(&bits, hdr + 34, 2);
    std::memcpy(&data_bytes, hdr + 40, 4);
    if (fmt != 1 || channels != 1 || bits != 16)
        throw IoError("unsupported WAV encoding (need PCM16 mono): " + path);
    Waveform w;
    w.sample_rate = (int)sr;
    w.samples.resize(data_bytes / 2);
    for (auto& s : w.samples) {
        int16_t q;
        f.read((char*)&q, 2);
        s = (float)q / 32767.0f;
    }
    if (!f) throw IoError("truncated WAV data: " + path);
    return w;
}

}  // namespace mds
