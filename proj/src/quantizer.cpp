#include "megalab/quantizer.hpp"

namespace megalab {

VectorQuantized vector_quantize(const ad::Var& h, const ad::Var& codebook) {
  if (h.cols() != codebook.cols()) {
    throw ValidationError("quantize: vector dimension " + std::to_string(h.cols()) + " does not match codebook " +
                          std::to_string(codebook.cols()));
  }
  VectorQuantized out;
  out.codes.reserve(static_cast<std::size_t>(h.rows()));
  for (Eigen::Index i = 0; i < h.rows(); ++i) out.codes.push_back(nearest_code(h.value().row(i), codebook.value()));
  const ad::Var z = ad::gather_rows(codebook, out.codes);
  const double inv_rows = h.rows() > 0 ? 1.0 / static_cast<double>(h.rows()) : 0.0;
  out.codebook_loss = ad::scale(ad::sum(ad::square(ad::sub(ad::detach(h), z))), inv_rows);
  out.commit_loss = ad::scale(ad::sum(ad::square(ad::sub(h, ad::detach(z)))), inv_rows);
  out.quantized = ad::straight_through(h, z.value());
  return out;
}

std::vector<int> expand_durations(std::span<const int> durations) {
  std::vector<int> index;
  for (std::size_t i = 0; i < durations.size(); ++i) {
    if (durations[i] < 0) {
      throw ValidationError("length_regulate: negative duration " + std::to_string(durations[i]) + " at phoneme " +
                            std::to_string(i));
    }
    index.insert(index.end(), static_cast<std::size_t>(durations[i]), static_cast<int>(i));
  }
  return index;
}

ad::Var length_regulate(const ad::Var& x, std::span<const int> durations) {
  if (static_cast<Eigen::Index>(durations.size()) != x.rows()) {
    throw ValidationError("length_regulate: " + std::to_string(durations.size()) + " durations for " +
                          std::to_string(x.rows()) + " rows");
  }
  return ad::gather_rows(x, expand_durations(durations));
}

Eigen::MatrixXd phoneme_pooling_matrix(std::span<const int> durations) {
  const auto index = expand_durations(durations);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(durations.size()),
                                            static_cast<Eigen::Index>(index.size()));
  for (std::size_t f = 0; f < index.size(); ++f) {
    p(index[f], static_cast<Eigen::Index>(f)) = 1.0 / durations[static_cast<std::size_t>(index[f])];
  }
  return p;
}

}  // namespace megalab
