#pragma once

#include <array>
#include <complex>
#include <string>
#include <vector>

#include "ecgclip/ecg_io.hpp"
#include "ecgclip/errors.hpp"
#include "ecgclip/util.hpp"

namespace ecgclip {

// One second-order section; a[0] == 1.
struct Biquad {
    std::array<double, 3> b{1.0, 0.0, 0.0};
    std::array<double, 3> a{1.0, 0.0, 0.0};
};

using SosCascade = std::vector<Biquad>;

struct FilterSpec {
    enum class Kind { bandpass, notch };

    Kind kind = Kind::bandpass;
    int order = 3;
    double low_hz = 0.5;
    double high_hz = 100.0;
    double center_hz = 50.0;
    double q = 30.0;
    double fs = 500.0;

    static FilterSpec bandpass(int order, double low_hz, double high_hz, double fs);
    // A single biquad notch; `order` is 1 so the edge padding is 3 * (2 + 1) = 9 samples.
    static FilterSpec notch(double center_hz, double q, double fs);

    void validate() const;
    // Odd-extension length used by the forward-backward filter.
    Eigen::Index padding() const { return 3 * (2 * order + 1); }
};

// Butterworth band-pass from analog prototype poles, low-pass to band-pass mapping
// and a pre-warped bilinear transform, grouped into `order` sections. Unit gain at
// the geometric centre frequency.
SosCascade design_sos(const FilterSpec& spec);

std::complex<double> frequency_response(const SosCascade& sos, double f_hz, double fs);

// Steady-state section states for a unit step input.
std::vector<std::array<double, 2>> sos_steady_state(const SosCascade& sos);

// Single pass, transposed direct form II. `zi` scaled initial states (may be empty for zeros).
Eigen::VectorXd sosfilt(const SosCascade& sos, const Eigen::Ref<const Eigen::VectorXd>& x,
                        std::vector<std::array<double, 2>> zi = {});

// Forward then backward pass with odd padding and steady-state initial conditions.
Eigen::VectorXd zero_phase_filter(const FilterSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& x);

// Band-limited resampling. Rational ratios use a Kaiser-windowed sinc (beta 8.6,
// 64 taps per phase at the narrower band edge); other ratios fall back to linear
// interpolation. Output length is round(n * fs_out / fs_in).
Eigen::VectorXd resample(const Eigen::Ref<const Eigen::VectorXd>& x, double fs_in, double fs_out = 500.0);

// Pad with trailing zeros or keep the first `length` samples.
Eigen::VectorXd fix_window(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Index length = 5000);

// Dependent limb leads by Einthoven's law (and the Goldberger augmented leads).
template <typename Derived>
struct LimbLeads {
    Derived iii, avr, avl, avf;
};

template <typename DerivedI, typename DerivedII>
auto reconstruct_limb_leads(const Eigen::MatrixBase<DerivedI>& lead_i, const Eigen::MatrixBase<DerivedII>& lead_ii) {
    using Plain = typename DerivedI::PlainObject;
    using Scalar = typename DerivedI::Scalar;
    if (lead_i.rows() != lead_ii.rows() || lead_i.cols() != lead_ii.cols())
        throw ShapeError("lead I and lead II differ in length");
    const Scalar half(0.5);
    return LimbLeads<Plain>{
        Plain(lead_ii - lead_i),
        Plain(-half * (lead_i + lead_ii)),
        Plain(lead_i - half * lead_ii),
        Plain(lead_ii - half * lead_i),
    };
}

// Preprocessed network input: leads I, II, V1..V6 at 500 Hz, 5000 samples, stored as float32.
struct SignalTensor {
    static constexpr Eigen::Index kLeads = 8;
    static constexpr Eigen::Index kSamples = 5000;
    static constexpr double kFs = 500.0;

    Eigen::MatrixXf data = Eigen::MatrixXf::Zero(kLeads, kSamples);

    static const std::vector<std::string>& lead_names();
    void validate() const;
    EcgRecord to_record(const std::string& patient_id, const std::string& record_id) const;
    static SignalTensor from_record(const EcgRecord& record);  // record must already be 8 x 5000 at 500 Hz
};

struct PreprocessConfig {
    int bandpass_order = 3;
    double low_hz = 0.5;
    double high_hz = 100.0;
    std::vector<double> notch_hz = {50.0, 100.0};
    double notch_q = 30.0;
};

// Per lead: band-pass -> notches -> resample to 500 Hz -> fixed 10 s window.
// Notches at or above Nyquist are skipped; the band-pass upper edge is clamped to 0.9 * fs/2.
SignalTensor preprocess(const EcgRecord& record, const PreprocessConfig& config = {});

// True when the record is already a preprocessed tensor (8 leads in tensor order, 500 Hz, 5000 samples).
bool is_tensor_record(const EcgRecord& record);

}  // namespace ecgclip
