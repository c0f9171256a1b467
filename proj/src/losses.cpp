#include "kdgan/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "kdgan/ops.hpp"

namespace kdgan {

Temperature::Temperature(double value) : value_(value) {
  if (!(value > 0.0) || !std::isfinite(value)) throw std::invalid_argument("temperature must be a positive real");
}

namespace {

template <typename T>
void require_logits(const Tensor<T>& x, const char* what) {
  if (!x.defined() || x.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected (B,C) scores, got " + (x.defined() ? to_string(x.shape()) : "undefined"));
  }
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  require_logits(a, what);
  require_logits(b, what);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, std::int64_t classes, const char* what) {
  std::vector<T> values(labels.size() * static_cast<std::size_t>(classes), T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw std::out_of_range(std::string(what) + ": label " + std::to_string(labels[i]) + " outside [0," +
                              std::to_string(classes) + ")");
    }
    values[i * static_cast<std::size_t>(classes) + static_cast<std::size_t>(labels[i])] = T(1);
  }
  return Tensor<T>::from(Shape{static_cast<std::int64_t>(labels.size()), classes}, std::move(values));
}

// mean_i log_softmax(scores)_i[column_i] for a fixed selector mask.
template <typename T>
Tensor<T> mean_selected_log_prob(const Tensor<T>& scores, const Tensor<T>& selector) {
  const T batch = static_cast<T>(scores.dim(0));
  return ops::scale(ops::sum(ops::mul(ops::log_softmax(scores), selector)), T(1) / batch);
}

template <typename T>
Tensor<T> column_selector(std::int64_t rows, std::int64_t column) {
  std::vector<T> values(static_cast<std::size_t>(rows * 2), T(0));
  for (std::int64_t i = 0; i < rows; ++i) values[static_cast<std::size_t>(i * 2 + column)] = T(1);
  return Tensor<T>::from(Shape{rows, 2}, std::move(values));
}

template <typename T>
Tensor<T> scaled_logits(const Tensor<T>& logits, Temperature temperature) {
  if (temperature.value() == 1.0) return logits;
  return ops::scale(logits, static_cast<T>(1.0 / temperature.value()));
}

}  // namespace

template <typename T>
Tensor<T> generalized_softmax(const Tensor<T>& logits, Temperature temperature) {
  require_logits(logits, "generalized_softmax");
  return ops::exp(ops::log_softmax(scaled_logits(logits, temperature)));
}

std::vector<double> generalized_softmax(const std::vector<double>& logits, Temperature temperature) {
  if (logits.empty()) throw std::invalid_argument("generalized_softmax: empty logits");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> q(logits.size());
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    q[j] = std::exp((logits[j] - peak) / temperature.value());
    total += q[j];
  }
  for (auto& v : q) v /= total;
  return q;
}

template <typename T>
Tensor<T> kd_loss(const Tensor<T>& teacher, const Tensor<T>& student, Temperature temperature) {
  require_same(teacher, student, "kd_loss");
  const Tensor<T> log_p = ops::log_softmax(scaled_logits(teacher, temperature));
  const Tensor<T> log_q = ops::log_softmax(scaled_logits(student, temperature));
  const Tensor<T> p = ops::exp(log_p);
  const T batch = static_cast<T>(teacher.dim(0));
  return ops::scale(ops::sum(ops::mul(p, ops::sub(log_p, log_q))), T(1) / batch);
}

template <typename T>
Tensor<T> supervised_loss(const std::vector<int>& labels, const Tensor<T>& student) {
  require_logits(student, "supervised_loss");
  if (static_cast<std::int64_t>(labels.size()) != student.dim(0)) {
    throw ShapeError("supervised_loss: " + std::to_string(labels.size()) + " labels for scores " +
                     to_string(student.shape()));
  }
  const Tensor<T> selector = one_hot<T>(labels, student.dim(1), "supervised_loss");
  return ops::scale(mean_selected_log_prob(student, selector), T(-1));
}

template <typename T>
Tensor<T> kd_combined_loss(const std::vector<int>& labels, const Tensor<T>& teacher, const Tensor<T>& student,
                           Temperature temperature) {
  const T t2 = static_cast<T>(temperature.value() * temperature.value());
  return ops::add(ops::scale(supervised_loss(labels, student), T(0.5)),
                  ops::scale(kd_loss(teacher, student, temperature), t2));
}

template <typename T>
Tensor<T> adversarial_loss(const Tensor<T>& d_real_scores, const Tensor<T>& d_fake_scores) {
  require_same(d_real_scores, d_fake_scores, "adversarial_loss");
  if (d_real_scores.dim(1) != 2) {
    throw ShapeError("adversarial_loss: expected (B,2) real/fake scores, got " + to_string(d_real_scores.shape()));
  }
  const std::int64_t rows = d_real_scores.dim(0);
  return ops::add(mean_selected_log_prob(d_real_scores, column_selector<T>(rows, 0)),
                  mean_selected_log_prob(d_fake_scores, column_selector<T>(rows, 1)));
}

template <typename T>
Tensor<T> discriminator_supervised_loss(const std::vector<int>& labels, const Tensor<T>& d_label_scores_real,
                                        const Tensor<T>& d_label_scores_fake) {
  require_same(d_label_scores_real, d_label_scores_fake, "discriminator_supervised_loss");
  if (static_cast<std::int64_t>(labels.size()) != d_label_scores_real.dim(0)) {
    throw ShapeError("discriminator_supervised_loss: " + std::to_string(labels.size()) + " labels for scores " +
                     to_string(d_label_scores_real.shape()));
  }
  const Tensor<T> selector = one_hot<T>(labels, d_label_scores_real.dim(1), "discriminator_supervised_loss");
  return ops::add(mean_selected_log_prob(d_label_scores_real, selector),
                  mean_selected_log_prob(d_label_scores_fake, selector));
}

template <typename T>
Tensor<T> discriminator_objective(const Tensor<T>& adversarial, const Tensor<T>& supervised) {
  return ops::scale(ops::add(adversarial, supervised), T(0.5));
}

template <typename T>
Tensor<T> l1_alignment_loss(const Tensor<T>& teacher, const Tensor<T>& student) {
  require_same(teacher, student, "l1_alignment_loss");
  const T batch = static_cast<T>(teacher.dim(0));
  return ops::scale(ops::sum(ops::abs(ops::sub(student, teacher))), T(1) / batch);
}

template <typename T>
Tensor<T> gan_loss(const Tensor<T>& adversarial, const Tensor<T>& supervised) {
  return ops::scale(ops::sub(adversarial, supervised), T(0.5));
}

template <typename T>
Tensor<T> student_objective(const Tensor<T>& supervised, const Tensor<T>& l1, const Tensor<T>& adversarial,
                            const Tensor<T>& disc_supervised) {
  return ops::add(ops::add(supervised, l1), gan_loss(adversarial, disc_supervised));
}

template <typename T>
Tensor<T> non_saturating_adversarial(const Tensor<T>& d_fake_scores) {
  require_logits(d_fake_scores, "non_saturating_adversarial");
  return ops::scale(mean_selected_log_prob(d_fake_scores, column_selector<T>(d_fake_scores.dim(0), 0)), T(-1));
}

// ---- LossReport ---------------------------------------------------------------

const std::vector<std::string>& LossReport::columns() {
  static const std::vector<std::string> kColumns = {"L_S",  "L_KD",  "L_KD_combined", "L_A",
                                                    "L_DS", "L_L1",  "L_GAN",         "L_Student",
                                                    "L_Discriminator"};
  return kColumns;
}

void LossReport::set(const std::string& name, double value) {
  const auto& cols = columns();
  if (std::find(cols.begin(), cols.end(), name) == cols.end()) {
    throw std::invalid_argument("LossReport: unknown term " + name);
  }
  if (!std::isfinite(value)) throw NumericError("LossReport: non-finite " + name);
  values_[name] = value;
}

std::optional<double> LossReport::get(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string format_scalar(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", value);
  return buf;
}

std::string LossReport::csv_fields() const {
  std::string out;
  bool first = true;
  for (const auto& name : columns()) {
    if (!first) out += ',';
    first = false;
    if (auto v = get(name)) out += format_scalar(*v);
  }
  return out;
}

std::string LossReport::csv_header() {
  std::string out;
  for (std::size_t i = 0; i < columns().size(); ++i) {
    if (i) out += ',';
    out += columns()[i];
  }
  return out;
}

#define KDGAN_INSTANTIATE_LOSSES(T)                                                                           \
  template Tensor<T> generalized_softmax(const Tensor<T>&, Temperature);                                      \
  template Tensor<T> kd_loss(const Tensor<T>&, const Tensor<T>&, Temperature);                                \
  template Tensor<T> supervised_loss(const std::vector<int>&, const Tensor<T>&);                              \
  template Tensor<T> kd_combined_loss(const std::vector<int>&, const Tensor<T>&, const Tensor<T>&, Temperature); \
  template Tensor<T> adversarial_loss(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> discriminator_supervised_loss(const std::vector<int>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> discriminator_objective(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> l1_alignment_loss(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> gan_loss(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> student_objective(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> non_saturating_adversarial(const Tensor<T>&);

KDGAN_INSTANTIATE_LOSSES(float)
KDGAN_INSTANTIATE_LOSSES(double)

}  // namespace kdgan
