#pragma once

#include <algorithm>
#include <complex>
#include <vector>

#include <Eigen/Core>

#include "stagesim/error.hpp"
#include "stagesim/fft.hpp"

namespace stagesim {

/* Uniformly partitioned overlap-save convolution.
 *
 * The impulse response is cut into P partitions of B samples. Each partition
 * is zero padded to 2B and transformed, giving B+1 bins per partition. Every
 * input block is appended to the previous one, the 2B frame is transformed
 * and stored in a ring of P input spectra (the frequency-domain delay line).
 * One output block is the last B samples of
 *
 *     IFFT( sum_p X[k - p] * H[p] ).
 *
 * The history and the filter are separate objects so that several filters
 * (every listener, every scenario) can share one input history.
 */

template <typename Scalar>
class PartitionedFilter {
 public:
  using Complex = std::complex<Scalar>;
  using SpectrumMatrix = Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic>;

  PartitionedFilter() = default;

  template <typename Derived>
  PartitionedFilter(const Eigen::MatrixBase<Derived>& ir, Eigen::Index block_size)
      : block_size_(block_size) {
    if (block_size < 1) throw ValidationError("PartitionedFilter: block size < 1");
    if (ir.size() < 1) throw ValidationError("PartitionedFilter: empty impulse response");
    const Eigen::Index parts = (ir.size() + block_size - 1) / block_size;
    RealFft<Scalar> fft(2 * block_size);
    spectra_.resize(fft.bins(), parts);
    VectorX<Scalar> frame(2 * block_size);
    for (Eigen::Index p = 0; p < parts; ++p) {
      frame.setZero();
      const Eigen::Index n = std::min(block_size, ir.size() - p * block_size);
      frame.head(n) = ir.segment(p * block_size, n).template cast<Scalar>();
      fft.forward(frame.data(), spectra_.col(p).data());
    }
  }

  Eigen::Index block_size() const { return block_size_; }
  Eigen::Index partitions() const { return spectra_.cols(); }
  Eigen::Index bins() const { return spectra_.rows(); }
  const SpectrumMatrix& spectra() const { return spectra_; }

 private:
  Eigen::Index block_size_ = 0;
  SpectrumMatrix spectra_;
};

template <typename Scalar>
class SpectralHistory {
 public:
  using Complex = std::complex<Scalar>;

  SpectralHistory(Eigen::Index block_size, Eigen::Index partitions)
      : block_size_(block_size),
        fft_(2 * block_size),
        frame_(VectorX<Scalar>::Zero(2 * block_size)),
        ring_(Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic>::Zero(fft_.bins(),
                                                                          std::max<Eigen::Index>(partitions, 1))) {
    if (block_size < 1) throw ValidationError("SpectralHistory: block size < 1");
  }

  Eigen::Index block_size() const { return block_size_; }
  Eigen::Index depth() const { return ring_.cols(); }

  // Append one block of exactly block_size() samples. Null means silence.
  void push(const Scalar* block) {
    std::copy_n(frame_.data() + block_size_, block_size_, frame_.data());
    if (block)
      frame_.tail(block_size_) = Eigen::Map<const VectorX<Scalar>>(block, block_size_);
    else
      frame_.tail(block_size_).setZero();
    head_ = (head_ + 1) % depth();
    fft_.forward(frame_.data(), ring_.col(head_).data());
  }

  // Spectrum of the frame pushed `age` blocks ago (0 = newest).
  auto spectrum(Eigen::Index age) const { return ring_.col((head_ - age % depth() + depth()) % depth()); }

  void reset() {
    frame_.setZero();
    ring_.setZero();
    head_ = 0;
  }

 private:
  Eigen::Index block_size_;
  RealFft<Scalar> fft_;
  VectorX<Scalar> frame_;
  Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic> ring_;
  Eigen::Index head_ = 0;
};

// acc += sum_p history[p] * filter[p]. The filter may hold fewer partitions
// than the history is deep; it must not hold more.
template <typename Scalar, typename Derived>
void accumulate(const SpectralHistory<Scalar>& history, const PartitionedFilter<Scalar>& filter,
                Eigen::MatrixBase<Derived>& acc) {
  const Eigen::Index parts = filter.partitions();
  for (Eigen::Index p = 0; p < parts; ++p)
    acc.noalias() += history.spectrum(p).cwiseProduct(filter.spectra().col(p));
}

template <typename Scalar, typename Derived>
void accumulate(const SpectralHistory<Scalar>& history, const PartitionedFilter<Scalar>& filter,
                Eigen::MatrixBase<Derived>&& acc) {
  accumulate(history, filter, acc);
}

// Inverse transform of an accumulated spectrum to one output block.
template <typename Scalar>
class OverlapSaveOutput {
 public:
  using Complex = std::complex<Scalar>;

  explicit OverlapSaveOutput(Eigen::Index block_size)
      : block_size_(block_size), fft_(2 * block_size), frame_(2 * block_size) {}

  Eigen::Index block_size() const { return block_size_; }
  Eigen::Index bins() const { return fft_.bins(); }

  template <typename Derived>
  void emit(const Eigen::MatrixBase<Derived>& acc, Scalar* out) {
    fft_.inverse(acc.derived().data(), frame_.data());
    std::copy_n(frame_.data() + block_size_, block_size_, out);
  }

 private:
  Eigen::Index block_size_;
  RealFft<Scalar> fft_;
  VectorX<Scalar> frame_;
};

// Single-channel streaming convolver: one block in, one block out, no
// allocation after construction.
template <typename Scalar>
class PartitionedConvolver {
 public:
  using Complex = std::complex<Scalar>;

  template <typename Derived>
  PartitionedConvolver(const Eigen::MatrixBase<Derived>& ir, Eigen::Index block_size)
      : filter_(ir, block_size),
        history_(block_size, filter_.partitions()),
        output_(block_size),
        acc_(ComplexVectorX<Scalar>::Zero(output_.bins())) {}

  Eigen::Index block_size() const { return filter_.block_size(); }
  Eigen::Index partitions() const { return filter_.partitions(); }

  void process(const Scalar* in, Scalar* out) {
    history_.push(in);
    acc_.setZero();
    accumulate(history_, filter_, acc_);
    output_.emit(acc_, out);
  }

  template <typename In, typename Out>
  void process(const Eigen::MatrixBase<In>& in, Eigen::MatrixBase<Out>& out) {
    if (in.size() != block_size() || out.size() != block_size())
      throw ValidationError("PartitionedConvolver: block length must equal the block size");
    process(in.derived().data(), out.derived().data());
  }

  // Convenience form that returns the output block (allocates).
  template <typename In>
  VectorX<Scalar> process(const Eigen::MatrixBase<In>& in) {
    VectorX<Scalar> out(block_size());
    VectorX<Scalar> copy = in.template cast<Scalar>();
    process(copy, out);
    return out;
  }

  void reset() { history_.reset(); }

 private:
  PartitionedFilter<Scalar> filter_;
  SpectralHistory<Scalar> history_;
  OverlapSaveOutput<Scalar> output_;
  ComplexVectorX<Scalar> acc_;
};

}  // namespace stagesim
