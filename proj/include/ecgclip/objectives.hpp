#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ecgclip/errors.hpp"
#include "ecgclip/util.hpp"

namespace ecgclip {

template <typename Scalar>
struct LossOutput {
    Scalar value = Scalar(0);
    std::vector<MatrixX<Scalar>> grads;  // one per input batch, same shape
};

namespace detail {

template <typename Derived>
void check_batch(const Eigen::MatrixBase<Derived>& m, const char* name, double tol = 1e-5) {
    using std::abs;
    if (m.rows() < 1) throw ShapeError(std::string(name) + " is empty");
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double n = static_cast<double>(m.row(i).norm());
        if (!(abs(n - 1.0) <= tol))
            throw NormalizationError(std::string(name) + " row " + std::to_string(i) + " has norm " + format_double(n, 9));
    }
}

// Row-wise log-softmax with max subtraction.
template <typename Scalar>
MatrixX<Scalar> log_softmax_rows(const MatrixX<Scalar>& s) {
    MatrixX<Scalar> out(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const Scalar m = s.row(i).maxCoeff();
        const Scalar lse = m + std::log((s.row(i).array() - m).exp().sum());
        out.row(i) = s.row(i).array() - lse;
    }
    return out;
}

}  // namespace detail

// Symmetric InfoNCE between two batches of unit-norm rows; row i of A pairs with row i of B.
template <typename DerivedA, typename DerivedB>
auto info_nce(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b, typename DerivedA::Scalar tau) {
    using Scalar = typename DerivedA::Scalar;
    if (!(tau > Scalar(0))) throw InvalidTemperature("temperature must be positive");
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("paired batches differ in shape");
    detail::check_batch(a, "first batch");
    detail::check_batch(b, "second batch");

    const Eigen::Index n = a.rows();
    const MatrixX<Scalar> s = (a * b.transpose()) / tau;
    const MatrixX<Scalar> lr = detail::log_softmax_rows<Scalar>(s);
    const MatrixX<Scalar> lc = detail::log_softmax_rows<Scalar>(s.transpose());

    LossOutput<Scalar> out;
    out.value = -(lr.diagonal().sum() + lc.diagonal().sum()) / Scalar(2 * n);

    // dL/dS = ((softmax_rows(S) - I) + (softmax_cols(S) - I)) / 2N
    const MatrixX<Scalar> id = MatrixX<Scalar>::Identity(n, n);
    const MatrixX<Scalar> ds =
        ((lr.array().exp().matrix() - id) + (lc.array().exp().matrix() - id).transpose()) / Scalar(2 * n);
    out.grads.push_back(ds * b / tau);
    out.grads.push_back(ds.transpose() * a / tau);
    if (!std::isfinite(static_cast<double>(out.value))) throw NumericError("contrastive loss is not finite");
    return out;
}

// Cross-modal alignment between signal embeddings E and report embeddings R.
template <typename DerivedA, typename DerivedB>
auto cma_loss(const Eigen::MatrixBase<DerivedA>& e, const Eigen::MatrixBase<DerivedB>& r, typename DerivedA::Scalar tau) {
    return info_nce(e, r, tau);
}

// Uni-modal alignment between two dropout views of the same signals.
template <typename DerivedA, typename DerivedB>
auto uma_loss(const Eigen::MatrixBase<DerivedA>& e_hat, const Eigen::MatrixBase<DerivedB>& e_tilde,
              typename DerivedA::Scalar tau) {
    return info_nce(e_hat, e_tilde, tau);
}

template <typename Scalar>
struct LossWeights {
    Scalar cma = Scalar(1);
    Scalar uma = Scalar(1);
};

// grads = {dE, dR, dEhat, dEtilde}.
template <typename Scalar>
LossOutput<Scalar> combined_loss(const MatrixX<Scalar>& e, const MatrixX<Scalar>& r, const MatrixX<Scalar>& e_hat,
                                 const MatrixX<Scalar>& e_tilde, Scalar tau, LossWeights<Scalar> w = {}) {
    auto c = cma_loss(e, r, tau);
    auto u = uma_loss(e_hat, e_tilde, tau);
    LossOutput<Scalar> out;
    out.value = w.cma * c.value + w.uma * u.value;
    out.grads = {w.cma * c.grads[0], w.cma * c.grads[1], w.uma * u.grads[0], w.uma * u.grads[1]};
    return out;
}

}  // namespace ecgclip
