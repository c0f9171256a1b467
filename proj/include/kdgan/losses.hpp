#pragma once

// Distillation and adversarial losses. All batch losses are minibatch means
// and return scalar tensors that can be differentiated.
//
// Discriminator real/fake scores are (B,2) pre-softmax pairs with column 0
// = Real and column 1 = Fake.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kdgan/tensor.hpp"

namespace kdgan {

class Temperature {
 public:
  explicit Temperature(double value);
  double value() const { return value_; }

 private:
  double value_;
};

// q_j = exp(t_j / T) / sum_k exp(t_k / T), rows of a (B,C) tensor.
template <typename T>
Tensor<T> generalized_softmax(const Tensor<T>& logits, Temperature temperature);
// Single logits vector.
std::vector<double> generalized_softmax(const std::vector<double>& logits, Temperature temperature);

// mean_i KL(softmax(t_i/T) || softmax(s_i/T)).
template <typename T>
Tensor<T> kd_loss(const Tensor<T>& teacher, const Tensor<T>& student, Temperature temperature);

// mean_i -log softmax(s_i)[label_i].
template <typename T>
Tensor<T> supervised_loss(const std::vector<int>& labels, const Tensor<T>& student);

// 0.5 * supervised + T^2 * kd.
template <typename T>
Tensor<T> kd_combined_loss(const std::vector<int>& labels, const Tensor<T>& teacher, const Tensor<T>& student,
                           Temperature temperature);

// mean_i [log P(Real | D(t_i)) + log P(Fake | D(F(x_i)))]; always <= 0.
template <typename T>
Tensor<T> adversarial_loss(const Tensor<T>& d_real_scores, const Tensor<T>& d_fake_scores);

// mean_i [log P(l_i | D(t_i)) + log P(l_i | D(F(x_i)))].
template <typename T>
Tensor<T> discriminator_supervised_loss(const std::vector<int>& labels, const Tensor<T>& d_label_scores_real,
                                        const Tensor<T>& d_label_scores_fake);

// The quantity the discriminator maximizes: 0.5 * (L_A + L_DS).
template <typename T>
Tensor<T> discriminator_objective(const Tensor<T>& adversarial, const Tensor<T>& supervised);

// mean_i ||F(x_i) - t_i||_1.
template <typename T>
Tensor<T> l1_alignment_loss(const Tensor<T>& teacher, const Tensor<T>& student);

// 0.5 * (L_A - L_DS).
template <typename T>
Tensor<T> gan_loss(const Tensor<T>& adversarial, const Tensor<T>& supervised);

// L_S + L_L1 + 0.5 * (L_A - L_DS).
template <typename T>
Tensor<T> student_objective(const Tensor<T>& supervised, const Tensor<T>& l1, const Tensor<T>& adversarial,
                            const Tensor<T>& disc_supervised);

// mean_i -log P(Real | D(F(x_i))): the non-saturating student term.
template <typename T>
Tensor<T> non_saturating_adversarial(const Tensor<T>& d_fake_scores);

// Named scalars for one minibatch; terms that were not computed are absent.
class LossReport {
 public:
  static const std::vector<std::string>& columns();

  void set(const std::string& name, double value);
  std::optional<double> get(const std::string& name) const;
  bool has(const std::string& name) const { return values_.count(name) != 0; }
  const std::map<std::string, double>& values() const { return values_; }

  // Fixed column order; absent terms are empty fields.
  std::string csv_fields() const;
  static std::string csv_header();

 private:
  std::map<std::string, double> values_;
};

std::string format_scalar(double value);

}  // namespace kdgan
