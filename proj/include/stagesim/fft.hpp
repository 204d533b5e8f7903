#pragma once

#include <complex>
#include <cstddef>

#include <Eigen/Core>
#include <unsupported/Eigen/FFT>

namespace stagesim {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using ComplexVectorX = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, 1>;

// Smallest power of two >= n (n >= 1).
inline Eigen::Index next_pow2(Eigen::Index n) {
  Eigen::Index p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Fixed-size real FFT producing the n/2+1 non-negative bins. The plan and
// scratch buffers are created in the constructor; forward()/inverse() do not
// allocate afterwards, which the streaming convolver relies on.
template <typename Scalar>
class RealFft {
 public:
  using Complex = std::complex<Scalar>;

  explicit RealFft(Eigen::Index size) : size_(size), fft_() {
    fft_.SetFlag(Eigen::FFT<Scalar>::HalfSpectrum);
    VectorX<Scalar> t = VectorX<Scalar>::Zero(size_);
    ComplexVectorX<Scalar> f = ComplexVectorX<Scalar>::Zero(bins());
    forward(t.data(), f.data());
    inverse(f.data(), t.data());
  }

  Eigen::Index size() const { return size_; }
  Eigen::Index bins() const { return size_ / 2 + 1; }

  void forward(const Scalar* time, Complex* freq) { fft_.fwd(freq, time, size_); }

  // Scaled inverse: inverse(forward(x)) == x.
  void inverse(const Complex* freq, Scalar* time) { fft_.inv(time, freq, size_); }

 private:
  Eigen::Index size_;
  Eigen::FFT<Scalar> fft_;
};

}  // namespace stagesim
