#pragma once

#include <stdexcept>
#include <string>

namespace fin {

// Root of every error thrown by the library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside its mathematical domain (coordinates, clock fields, ...).
class input_domain_error : public error {
 public:
  using error::error;
};

// Malformed text or binary input.
class format_error : public error {
 public:
  using error::error;
};

class dimension_error : public error {
 public:
  using error::error;
};

// Input for which the operation has no defined result (all positions masked).
class degenerate_input_error : public error {
 public:
  using error::error;
};

class fit_error : public error {
 public:
  using error::error;
};

class training_error : public error {
 public:
  using error::error;
};

class model_error : public error {
 public:
  using error::error;
};

// Metric undefined for the given labels (single class AUC).
class metric_error : public error {
 public:
  using error::error;
};

class config_error : public error {
 public:
  using error::error;
};

class data_error : public error {
 public:
  using error::error;
};

}  // namespace fin
