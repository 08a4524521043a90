#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace lmt {

// Severity grades live on the 5-level ICDR scale, 0 (none) .. 4 (proliferative).
inline constexpr int kNumGrades = 5;

inline void check_grade(int grade) {
  if (grade < 0 || grade >= kNumGrades)
    throw std::invalid_argument("grade " + std::to_string(grade) +
                                " outside [0, " + std::to_string(kNumGrades - 1) +
                                "]");
}

// Timestamps are measured in units of two years (days / 730).
inline constexpr double kDaysPerTimeUnit = 2.0 * 365.0;

inline double normalize_time(double days) {
  if (days < 0.0)
    throw std::invalid_argument("normalize_time: negative days " +
                                std::to_string(days));
  return days / kDaysPerTimeUnit;
}

// Assumed severity course between two consecutive exams of the same eye.
// kExponential evaluates on grade+1 so grade 0 is well defined; the literal
// variant keeps the unshifted ratio form and rejects a zero start grade.
enum class ProfileKind { kLinear, kExponential, kExponentialLiteral };

inline ProfileKind profile_from_string(const std::string& s) {
  if (s == "linear") return ProfileKind::kLinear;
  if (s == "exp" || s == "exponential") return ProfileKind::kExponential;
  if (s == "exp_literal") return ProfileKind::kExponentialLiteral;
  throw std::invalid_argument("unknown profile '" + s + "'");
}

inline const char* to_string(ProfileKind p) {
  switch (p) {
    case ProfileKind::kLinear: return "linear";
    case ProfileKind::kExponential: return "exp";
    case ProfileKind::kExponentialLiteral: return "exp_literal";
  }
  return "?";
}

// Severity at time t between (t_i, s_i) and (t_ip1, s_ip1). Both profiles
// reproduce the endpoints exactly and are monotone in between.
inline double interpolate_severity(ProfileKind profile, int s_i, int s_ip1,
                                   double t_i, double t_ip1, double t) {
  check_grade(s_i);
  check_grade(s_ip1);
  if (t_i >= t_ip1)
    throw std::invalid_argument("interpolate_severity: need t_i < t_ip1, got " +
                                std::to_string(t_i) + " >= " +
                                std::to_string(t_ip1));
  if (t < t_i || t > t_ip1)
    throw std::invalid_argument("interpolate_severity: t=" + std::to_string(t) +
                                " outside [" + std::to_string(t_i) + ", " +
                                std::to_string(t_ip1) + "]");
  const double frac = (t - t_i) / (t_ip1 - t_i);
  switch (profile) {
    case ProfileKind::kLinear:
      return static_cast<double>(s_i) +
             frac * static_cast<double>(s_ip1 - s_i);
    case ProfileKind::kExponential: {
      const double a = static_cast<double>(s_i) + 1.0;
      const double b = static_cast<double>(s_ip1) + 1.0;
      return a * std::pow(b / a, frac) - 1.0;
    }
    case ProfileKind::kExponentialLiteral: {
      if (s_i == 0)
        throw std::domain_error(
            "interpolate_severity: literal exponential profile is undefined "
            "for start grade 0");
      const double a = static_cast<double>(s_i);
      const double b = static_cast<double>(s_ip1);
      return a * std::pow(b / a, frac);
    }
  }
  throw std::invalid_argument("interpolate_severity: unknown profile");
}

}  // namespace lmt
