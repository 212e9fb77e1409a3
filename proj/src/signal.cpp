#include "ecgclip/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace ecgclip {

using cd = std::complex<double>;

FilterSpec FilterSpec::bandpass(int order, double low_hz, double high_hz, double fs) {
    FilterSpec s;
    s.kind = Kind::bandpass;
    s.order = order;
    s.low_hz = low_hz;
    s.high_hz = high_hz;
    s.fs = fs;
    return s;
}

FilterSpec FilterSpec::notch(double center_hz, double q, double fs) {
    FilterSpec s;
    s.kind = Kind::notch;
    s.order = 1;
    s.center_hz = center_hz;
    s.q = q;
    s.fs = fs;
    return s;
}

void FilterSpec::validate() const {
    if (!(fs > 0.0)) throw InvalidRate("filter sampling rate must be positive");
    if (order < 1) throw InvalidSpec("filter order must be >= 1");
    const double nyq = fs / 2.0;
    if (kind == Kind::bandpass) {
        if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < nyq))
            throw InvalidSpec("band-pass needs 0 < low < high < fs/2");
    } else {
        if (!(center_hz > 0.0 && center_hz < nyq)) throw InvalidSpec("notch needs 0 < center < fs/2");
        if (!(q > 0.0)) throw InvalidSpec("notch quality factor must be positive");
    }
}

namespace {

Biquad section_from_poles(cd z1, cd z2) {
    Biquad s;
    s.b = {1.0, 0.0, -1.0};  // one zero at DC, one at Nyquist
    s.a = {1.0, -(z1 + z2).real(), (z1 * z2).real()};
    return s;
}

SosCascade design_butter_bandpass(const FilterSpec& spec) {
    const int n = spec.order;
    const double fs2 = 2.0 * spec.fs;
    const double w1 = fs2 * std::tan(std::numbers::pi * spec.low_hz / spec.fs);
    const double w2 = fs2 * std::tan(std::numbers::pi * spec.high_hz / spec.fs);
    const double bw = w2 - w1;
    const double w0sq = w1 * w2;

    std::vector<cd> poles;
    for (int k = 0; k < n; ++k) {
        const cd p = std::polar(1.0, std::numbers::pi * (2.0 * k + n + 1.0) / (2.0 * n));
        const cd a = p * (bw / 2.0);
        const cd d = std::sqrt(a * a - w0sq);
        for (cd s : {a + d, a - d}) poles.push_back((fs2 + s) / (fs2 - s));
    }

    std::vector<cd> upper;
    std::vector<double> real;
    for (cd z : poles) {
        if (std::abs(z.imag()) <= 1e-12 * std::max(1.0, std::abs(z)))
            real.push_back(z.real());
        else if (z.imag() > 0.0)
            upper.push_back(z);
    }
    std::sort(real.begin(), real.end());
    std::sort(upper.begin(), upper.end(), [](cd a, cd b) { return std::arg(a) < std::arg(b); });

    SosCascade sos;
    for (cd z : upper) sos.push_back(section_from_poles(z, std::conj(z)));
    for (std::size_t i = 0; i + 1 < real.size(); i += 2) sos.push_back(section_from_poles(real[i], real[i + 1]));

    // Unit magnitude at the digital image of the analog centre frequency.
    const double f0 = spec.fs / std::numbers::pi * std::atan(std::sqrt(w0sq) / fs2);
    const double g = std::pow(1.0 / std::abs(frequency_response(sos, f0, spec.fs)), 1.0 / static_cast<double>(sos.size()));
    for (auto& s : sos)
        for (double& c : s.b) c *= g;
    return sos;
}

SosCascade design_notch(const FilterSpec& spec) {
    const double w0 = 2.0 * std::numbers::pi * spec.center_hz / spec.fs;
    const double bw = w0 / spec.q;
    const double beta = std::tan(bw / 2.0);
    const double gain = 1.0 / (1.0 + beta);
    Biquad s;
    s.b = {gain, -2.0 * gain * std::cos(w0), gain};
    s.a = {1.0, -2.0 * gain * std::cos(w0), 2.0 * gain - 1.0};
    return {s};
}

}  // namespace

SosCascade design_sos(const FilterSpec& spec) {
    spec.validate();
    return spec.kind == FilterSpec::Kind::bandpass ? design_butter_bandpass(spec) : design_notch(spec);
}

cd frequency_response(const SosCascade& sos, double f_hz, double fs) {
    const cd zinv = std::polar(1.0, -2.0 * std::numbers::pi * f_hz / fs);
    cd h = 1.0;
    for (const auto& s : sos)
        h *= (s.b[0] + zinv * (s.b[1] + zinv * s.b[2])) / (s.a[0] + zinv * (s.a[1] + zinv * s.a[2]));
    return h;
}

std::vector<std::array<double, 2>> sos_steady_state(const SosCascade& sos) {
    std::vector<std::array<double, 2>> zi;
    double scale = 1.0;
    for (const auto& s : sos) {
        const double dc = (s.b[0] + s.b[1] + s.b[2]) / (s.a[0] + s.a[1] + s.a[2]);
        zi.push_back({scale * (dc - s.b[0]), scale * (s.b[2] - s.a[2] * dc)});
        scale *= dc;
    }
    return zi;
}

Eigen::VectorXd sosfilt(const SosCascade& sos, const Eigen::Ref<const Eigen::VectorXd>& x,
                        std::vector<std::array<double, 2>> zi) {
    zi.resize(sos.size(), {0.0, 0.0});
    Eigen::VectorXd y = x;
    for (std::size_t k = 0; k < sos.size(); ++k) {
        const auto& s = sos[k];
        double z1 = zi[k][0];
        double z2 = zi[k][1];
        for (Eigen::Index i = 0; i < y.size(); ++i) {
            const double in = y[i];
            const double out = s.b[0] * in + z1;
            z1 = s.b[1] * in - s.a[1] * out + z2;
            z2 = s.b[2] * in - s.a[2] * out;
            y[i] = out;
        }
    }
    return y;
}

Eigen::VectorXd zero_phase_filter(const FilterSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& x) {
    const auto sos = design_sos(spec);
    const Eigen::Index pad = spec.padding();
    const Eigen::Index n = x.size();
    if (n <= pad)
        throw TooShort("signal of " + std::to_string(n) + " samples is too short for padding of " + std::to_string(pad));

    Eigen::VectorXd ext(n + 2 * pad);
    for (Eigen::Index i = 0; i < pad; ++i) {
        ext[i] = 2.0 * x[0] - x[pad - i];
        ext[n + pad + i] = 2.0 * x[n - 1] - x[n - 2 - i];
    }
    ext.segment(pad, n) = x;

    const auto steady = sos_steady_state(sos);
    auto scaled = [&](double v) {
        auto zi = steady;
        for (auto& z : zi) z = {z[0] * v, z[1] * v};
        return zi;
    };
    Eigen::VectorXd fwd = sosfilt(sos, ext, scaled(ext[0]));
    Eigen::VectorXd rev = fwd.reverse();
    Eigen::VectorXd back = sosfilt(sos, rev, scaled(rev[0]));
    return back.reverse().segment(pad, n);
}

namespace {

bool rational_ratio(double fs_in, double fs_out, long long& up, long long& down) {
    const double ratio = fs_out / fs_in;
    for (long long q = 1; q <= 1000; ++q) {
        const double p = std::round(ratio * static_cast<double>(q));
        if (p < 1.0 || p > 10000.0) continue;
        if (std::abs(p / static_cast<double>(q) - ratio) <= 1e-12 * ratio) {
            const auto pi = static_cast<long long>(p);
            const long long g = std::gcd(pi, q);
            up = pi / g;
            down = q / g;
            return true;
        }
    }
    return false;
}

double sinc(double x) {
    if (std::abs(x) < 1e-12) return 1.0;
    const double px = std::numbers::pi * x;
    return std::sin(px) / px;
}

}  // namespace

Eigen::VectorXd resample(const Eigen::Ref<const Eigen::VectorXd>& x, double fs_in, double fs_out) {
    if (!(fs_in > 0.0) || !(fs_out > 0.0)) throw InvalidRate("sampling rates must be positive");
    if (fs_in == fs_out) return x;
    const Eigen::Index n = x.size();
    const auto out_len = static_cast<Eigen::Index>(std::llround(static_cast<double>(n) * fs_out / fs_in));
    Eigen::VectorXd y = Eigen::VectorXd::Zero(out_len);
    if (n == 0) return y;

    long long up = 0;
    long long down = 0;
    if (!rational_ratio(fs_in, fs_out, up, down)) {
        for (Eigen::Index k = 0; k < out_len; ++k) {
            const double t = static_cast<double>(k) * fs_in / fs_out;
            const auto i0 = static_cast<Eigen::Index>(std::floor(t));
            const double frac = t - static_cast<double>(i0);
            const double a = i0 < n ? x[i0] : 0.0;
            const double b = i0 + 1 < n ? x[i0 + 1] : 0.0;
            y[k] = a + frac * (b - a);
        }
        return y;
    }

    // Polyphase: output k sits at input position k*down/up; its phase is (k*down) mod up.
    constexpr double kBeta = 8.6;
    constexpr double kHalfTaps = 32.0;
    const double cutoff = std::min(1.0, static_cast<double>(up) / static_cast<double>(down));
    const double half_width = kHalfTaps / cutoff;
    const auto reach = static_cast<long long>(std::ceil(half_width));
    const double i0_beta = std::cyl_bessel_i(0.0, kBeta);

    std::vector<std::vector<double>> phases(static_cast<std::size_t>(up));
    for (long long ph = 0; ph < up; ++ph) {
        const double frac = static_cast<double>(ph) / static_cast<double>(up);
        auto& taps = phases[static_cast<std::size_t>(ph)];
        taps.resize(static_cast<std::size_t>(2 * reach + 1));
        double sum = 0.0;
        for (long long j = -reach; j <= reach; ++j) {
            const double d = frac - static_cast<double>(j);  // output position minus tap position
            const double u = d / half_width;
            double w = 0.0;
            if (std::abs(u) < 1.0) w = std::cyl_bessel_i(0.0, kBeta * std::sqrt(1.0 - u * u)) / i0_beta;
            const double h = cutoff * sinc(cutoff * d) * w;
            taps[static_cast<std::size_t>(j + reach)] = h;
            sum += h;
        }
        for (double& h : taps) h /= sum;
    }

    for (Eigen::Index k = 0; k < out_len; ++k) {
        const long long pos = static_cast<long long>(k) * down;
        const long long base = pos / up;
        const auto& taps = phases[static_cast<std::size_t>(pos % up)];
        double acc = 0.0;
        for (long long j = -reach; j <= reach; ++j) {
            const long long idx = base + j;
            if (idx < 0 || idx >= n) continue;
            acc += taps[static_cast<std::size_t>(j + reach)] * x[idx];
        }
        y[k] = acc;
    }
    return y;
}

Eigen::VectorXd fix_window(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Index length) {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(length);
    const Eigen::Index keep = std::min(length, x.size());
    y.head(keep) = x.head(keep);
    return y;
}

const std::vector<std::string>& SignalTensor::lead_names() {
    static const std::vector<std::string> names = {"I", "II", "V1", "V2", "V3", "V4", "V5", "V6"};
    return names;
}

void SignalTensor::validate() const {
    if (data.rows() != kLeads || data.cols() != kSamples) throw ShapeError("signal tensor must be 8 x 5000");
    if (!data.allFinite()) throw NumericError("signal tensor has non-finite entries");
}

EcgRecord SignalTensor::to_record(const std::string& patient_id, const std::string& record_id) const {
    EcgRecord r;
    r.patient_id = patient_id;
    r.record_id = record_id;
    r.fs = kFs;
    r.leads = lead_names();
    r.samples = data.cast<double>();
    return r;
}

bool is_tensor_record(const EcgRecord& record) {
    return record.fs == SignalTensor::kFs && record.leads == SignalTensor::lead_names() &&
           record.samples.cols() == SignalTensor::kSamples;
}

SignalTensor SignalTensor::from_record(const EcgRecord& record) {
    if (!is_tensor_record(record))
        throw ShapeError("record " + record.record_id + " is not a preprocessed 8 x 5000 tensor at 500 Hz");
    SignalTensor t;
    t.data = record.samples.cast<float>();
    t.validate();
    return t;
}

SignalTensor preprocess(const EcgRecord& record, const PreprocessConfig& config) {
    record.validate();
    const double nyq = record.fs / 2.0;
    const double high = std::min(config.high_hz, 0.9 * nyq);
    const auto band = FilterSpec::bandpass(config.bandpass_order, config.low_hz, high, record.fs);
    std::vector<FilterSpec> notches;
    for (double f : config.notch_hz)
        if (f < nyq) notches.push_back(FilterSpec::notch(f, config.notch_q, record.fs));

    SignalTensor out;
    const auto& names = SignalTensor::lead_names();
    for (std::size_t l = 0; l < names.size(); ++l) {
        const Eigen::Index row = record.lead_index(names[l]);
        if (row < 0) throw MissingLead("record " + record.record_id + " is missing lead " + names[l]);
        Eigen::VectorXd x = record.samples.row(row).transpose();
        x = zero_phase_filter(band, x);
        for (const auto& nf : notches) x = zero_phase_filter(nf, x);
        x = resample(x, record.fs, SignalTensor::kFs);
        out.data.row(static_cast<Eigen::Index>(l)) = fix_window(x, SignalTensor::kSamples).cast<float>().transpose();
    }
    out.validate();
    return out;
}

}  // namespace ecgclip
