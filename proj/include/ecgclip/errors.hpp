#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ecgclip {

// Bad inputs, configuration or preconditions. The CLI maps these to exit code 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Failures while doing the work on valid inputs (numerics, I/O). Exit code 2.
class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define ECGCLIP_DEFINE_ERROR(Name, Base)        \
    class Name : public Base {                  \
    public:                                     \
        using Base::Base;                       \
    }

ECGCLIP_DEFINE_ERROR(InvalidSpec, ValidationError);
ECGCLIP_DEFINE_ERROR(InvalidRatio, ValidationError);
ECGCLIP_DEFINE_ERROR(InvalidRate, ValidationError);
ECGCLIP_DEFINE_ERROR(ShapeError, ValidationError);
ECGCLIP_DEFINE_ERROR(MissingLead, ValidationError);
ECGCLIP_DEFINE_ERROR(TooShort, ValidationError);
ECGCLIP_DEFINE_ERROR(InvalidTemperature, ValidationError);
ECGCLIP_DEFINE_ERROR(NormalizationError, ValidationError);
ECGCLIP_DEFINE_ERROR(UndefinedMetric, ValidationError);
ECGCLIP_DEFINE_ERROR(AlignmentError, ValidationError);
ECGCLIP_DEFINE_ERROR(DegenerateInput, ValidationError);
ECGCLIP_DEFINE_ERROR(CompileError, ValidationError);
ECGCLIP_DEFINE_ERROR(ConfigError, ValidationError);

ECGCLIP_DEFINE_ERROR(NumericError, RuntimeError);
ECGCLIP_DEFINE_ERROR(UnstableCI, RuntimeError);
ECGCLIP_DEFINE_ERROR(IoError, RuntimeError);

#undef ECGCLIP_DEFINE_ERROR

// Malformed file contents; carries the byte offset where parsing failed.
class FormatError : public ValidationError {
public:
    FormatError(const std::string& what, std::size_t offset)
        : ValidationError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace ecgclip
