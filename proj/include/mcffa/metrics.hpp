#pragma once

// Confusion matrices and accuracy / precision / recall / F1 with exact
// rational values and macro averaging.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace mcffa {

// Reduced fraction with a positive denominator.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Rational of(std::int64_t num, std::int64_t den);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  // 100 * value rounded half-up to hundredths, as an integer count of 0.01.
  std::int64_t percent_cents() const;

  friend bool operator==(const Rational&, const Rational&) = default;
};

Rational operator+(const Rational& a, const Rational& b);
Rational operator/(const Rational& a, std::int64_t n);

struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::int64_t> counts;  // row = actual, column = predicted

  explicit ConfusionMatrix(std::size_t classes = 0) : k(classes), counts(classes * classes, 0) {}
  std::int64_t at(std::size_t actual, std::size_t predicted) const { return counts[actual * k + predicted]; }
  std::int64_t& at(std::size_t actual, std::size_t predicted) { return counts[actual * k + predicted]; }
  std::int64_t total() const;
  std::int64_t row_sum(std::size_t c) const;
  std::int64_t col_sum(std::size_t c) const;
  std::int64_t tp(std::size_t c) const { return at(c, c); }
  std::int64_t fp(std::size_t c) const { return col_sum(c) - tp(c); }
  std::int64_t fn(std::size_t c) const { return row_sum(c) - tp(c); }
  std::int64_t tn(std::size_t c) const { return total() - tp(c) - fp(c) - fn(c); }
};

ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t k);

struct ClassMetrics {
  Rational precision, recall, f1;
  // False when the denominator is zero; the value is then 0.
  bool precision_defined = true, recall_defined = true, f1_defined = true;
  std::int64_t support = 0;
};

struct MetricReport {
  ConfusionMatrix matrix;
  Rational accuracy;
  Rational macro_precision, macro_recall, macro_f1;
  std::vector<ClassMetrics> per_class;

  // accuracy, precision, recall, f1 in hundredths of a percent.
  std::vector<std::int64_t> headline_cents() const;
};

// Per class one-vs-rest: precision = TP/(TP+FP), recall = TP/(TP+FN),
// F1 = 2PR/(P+R) = 2TP/(2TP+FP+FN); macro values are unweighted class means.
MetricReport metrics(const ConfusionMatrix& m);

// "90.13" from 9013.
std::string format_cents(std::int64_t cents);
// Comma-joined 2-dp values.
std::string headline_row(const std::vector<std::int64_t>& cents);

// Half-up mean of per-fold cents: round(sum / n) at hundredths.
std::int64_t mean_cents(const std::vector<std::int64_t>& cents);

// "csv": header accuracy,precision,recall,f1 and one value row.
// "text": headline metrics, per-class table and the confusion grid.
std::string report_render(const MetricReport& report, const std::string& format,
                          const std::vector<std::string>& class_names = {});

// Confusion grid as CSV, rows actual, columns predicted.
std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& class_names = {});

}  // namespace mcffa
