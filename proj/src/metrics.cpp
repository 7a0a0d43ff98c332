#include "mcffa/metrics.hpp"

#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "mcffa/data.hpp"
#include "mcffa/errors.hpp"

namespace mcffa {

namespace {

using Wide = __int128;

std::int64_t narrow(Wide v) {
  if (v > std::numeric_limits<std::int64_t>::max() || v < std::numeric_limits<std::int64_t>::min()) {
    throw NumericError("rational overflow");
  }
  return static_cast<std::int64_t>(v);
}

Wide wide_gcd(Wide a, Wide b) {
  if (a < 0) a = -a;
  if (b < 0) b = -b;
  while (b != 0) {
    Wide t = a % b;
    a = b;
    b = t;
  }
  return a;
}

Rational reduce(Wide num, Wide den) {
  if (den == 0) throw NumericError("rational with zero denominator");
  if (den < 0) num = -num, den = -den;
  const Wide g = wide_gcd(num, den);
  if (g > 1) num /= g, den /= g;
  return {narrow(num), narrow(den)};
}

std::vector<std::string> names_for(std::size_t k, const std::vector<std::string>& given) {
  if (!given.empty()) {
    if (given.size() != k) throw ConfigError("class name count differs from matrix size");
    return given;
  }
  std::vector<std::string> n;
  for (std::size_t c = 0; c < k; ++c) n.push_back(k == kNumClasses ? kClassNames[c] : "class" + std::to_string(c));
  return n;
}

}  // namespace

Rational Rational::of(std::int64_t num, std::int64_t den) { return reduce(num, den); }

std::int64_t Rational::percent_cents() const {
  // floor((num * 10000 * 2 + den) / (2 * den)) for num >= 0.
  const Wide n = static_cast<Wide>(num) * 20000 + den;
  const Wide d = static_cast<Wide>(den) * 2;
  Wide q = n / d;
  if (n % d != 0 && n < 0) --q;
  return narrow(q);
}

Rational operator+(const Rational& a, const Rational& b) {
  return reduce(static_cast<Wide>(a.num) * b.den + static_cast<Wide>(b.num) * a.den, static_cast<Wide>(a.den) * b.den);
}

Rational operator/(const Rational& a, std::int64_t n) { return reduce(a.num, static_cast<Wide>(a.den) * n); }

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

std::int64_t ConfusionMatrix::row_sum(std::size_t c) const {
  std::int64_t s = 0;
  for (std::size_t p = 0; p < k; ++p) s += at(c, p);
  return s;
}

std::int64_t ConfusionMatrix::col_sum(std::size_t c) const {
  std::int64_t s = 0;
  for (std::size_t a = 0; a < k; ++a) s += at(a, c);
  return s;
}

ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t k) {
  if (preds.size() != labels.size()) throw ShapeError("prediction and label counts differ");
  if (k == 0) throw ConfigError("class count must be positive");
  ConfusionMatrix m(k);
  const int kk = static_cast<int>(k);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= kk) throw DataError("predicted class " + std::to_string(preds[i]) + " out of range");
    if (labels[i] < 0 || labels[i] >= kk) throw DataError("label " + std::to_string(labels[i]) + " out of range");
    ++m.at(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i]));
  }
  return m;
}

MetricReport metrics(const ConfusionMatrix& m) {
  const std::int64_t total = m.total();
  if (m.k == 0 || total <= 0) throw DataError("metrics of an empty confusion matrix");
  MetricReport r;
  r.matrix = m;
  std::int64_t trace = 0;
  for (std::size_t c = 0; c < m.k; ++c) trace += m.tp(c);
  r.accuracy = Rational::of(trace, total);
  for (std::size_t c = 0; c < m.k; ++c) {
    ClassMetrics cm;
    const std::int64_t tp = m.tp(c), fp = m.fp(c), fn = m.fn(c);
    cm.support = m.row_sum(c);
    if (tp + fp > 0) cm.precision = Rational::of(tp, tp + fp);
    else cm.precision_defined = false;
    if (tp + fn > 0) cm.recall = Rational::of(tp, tp + fn);
    else cm.recall_defined = false;
    if (tp > 0) {
      cm.f1 = Rational::of(2 * tp, 2 * tp + fp + fn);
    } else {
      // P + R = 0 (or undefined); F1 is 0 by convention.
      cm.f1_defined = cm.precision_defined && cm.recall_defined;
    }
    r.macro_precision = r.macro_precision + cm.precision;
    r.macro_recall = r.macro_recall + cm.recall;
    r.macro_f1 = r.macro_f1 + cm.f1;
    r.per_class.push_back(cm);
  }
  const auto k = static_cast<std::int64_t>(m.k);
  r.macro_precision = r.macro_precision / k;
  r.macro_recall = r.macro_recall / k;
  r.macro_f1 = r.macro_f1 / k;
  return r;
}

std::vector<std::int64_t> MetricReport::headline_cents() const {
  return {accuracy.percent_cents(), macro_precision.percent_cents(), macro_recall.percent_cents(),
          macro_f1.percent_cents()};
}

std::string format_cents(std::int64_t cents) {
  const bool neg = cents < 0;
  const std::int64_t a = neg ? -cents : cents;
  std::ostringstream os;
  os << (neg ? "-" : "") << a / 100 << '.' << std::setw(2) << std::setfill('0') << a % 100;
  return os.str();
}

std::string headline_row(const std::vector<std::int64_t>& cents) {
  std::string s;
  for (std::size_t i = 0; i < cents.size(); ++i) {
    if (i) s += ',';
    s += format_cents(cents[i]);
  }
  return s;
}

std::int64_t mean_cents(const std::vector<std::int64_t>& cents) {
  if (cents.empty()) throw DataError("mean of no values");
  const auto n = static_cast<std::int64_t>(cents.size());
  const std::int64_t sum = std::accumulate(cents.begin(), cents.end(), std::int64_t{0});
  // Half-up on the exact quotient sum / n.
  const std::int64_t num = 2 * sum + n, den = 2 * n;
  std::int64_t q = num / den;
  if (num % den != 0 && num < 0) --q;
  return q;
}

std::string report_render(const MetricReport& report, const std::string& format,
                          const std::vector<std::string>& class_names) {
  const auto cents = report.headline_cents();
  if (format == "csv") return "accuracy,precision,recall,f1\n" + headline_row(cents) + "\n";
  if (format != "text") throw ConfigError("unknown report format '" + format + "' (expected csv or text)");
  const auto names = names_for(report.matrix.k, class_names);
  std::size_t w = 9;
  for (const auto& n : names) w = std::max(w, n.size());
  std::ostringstream os;
  os << "accuracy  " << format_cents(cents[0]) << "\n"
     << "precision " << format_cents(cents[1]) << "\n"
     << "recall    " << format_cents(cents[2]) << "\n"
     << "f1        " << format_cents(cents[3]) << "\n\n";
  os << std::left << std::setw(static_cast<int>(w)) << "class" << std::right << std::setw(11) << "precision"
     << std::setw(11) << "recall" << std::setw(11) << "f1" << std::setw(9) << "support" << "\n";
  auto cell = [](const Rational& v, bool defined) {
    return defined ? format_cents(v.percent_cents()) : format_cents(0) + "*";
  };
  bool any_undefined = false;
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& m = report.per_class[c];
    any_undefined = any_undefined || !m.precision_defined || !m.recall_defined || !m.f1_defined;
    os << std::left << std::setw(static_cast<int>(w)) << names[c] << std::right << std::setw(11)
       << cell(m.precision, m.precision_defined) << std::setw(11) << cell(m.recall, m.recall_defined)
       << std::setw(11) << cell(m.f1, m.f1_defined) << std::setw(9) << m.support << "\n";
  }
  if (any_undefined) os << "* undefined (zero denominator), counted as 0\n";
  os << "\nconfusion (rows actual, columns predicted)\n";
  os << std::setw(static_cast<int>(w)) << "";
  for (const auto& n : names) os << ' ' << std::setw(static_cast<int>(w)) << n;
  os << "\n";
  for (std::size_t a = 0; a < report.matrix.k; ++a) {
    os << std::left << std::setw(static_cast<int>(w)) << names[a] << std::right;
    for (std::size_t p = 0; p < report.matrix.k; ++p) os << ' ' << std::setw(static_cast<int>(w)) << report.matrix.at(a, p);
    os << "\n";
  }
  return os.str();
}

std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& class_names) {
  const auto names = names_for(m.k, class_names);
  std::string s = "actual";
  for (const auto& n : names) s += "," + n;
  s += "\n";
  for (std::size_t a = 0; a < m.k; ++a) {
    s += names[a];
    for (std::size_t p = 0; p < m.k; ++p) s += "," + std::to_string(m.at(a, p));
    s += "\n";
  }
  return s;
}

}  // namespace mcffa
