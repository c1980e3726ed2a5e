#include "upscale/tensor.hpp"

#include <cstring>

namespace upscale {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Dimension: return "dimension error";
        case ErrorKind::Parameter: return "parameter error";
        case ErrorKind::Contract: return "contract error";
        case ErrorKind::Validation: return "validation error";
        case ErrorKind::Format: return "format error";
        case ErrorKind::Id: return "id error";
        case ErrorKind::Context: return "context error";
        case ErrorKind::Io: return "i/o error";
        case ErrorKind::Numeric: return "numeric error";
    }
    return "error";
}

const char* to_string(FormatCode code) {
    switch (code) {
        case FormatCode::BadMagic: return "bad magic";
        case FormatCode::BadHeaderLength: return "bad header length";
        case FormatCode::BadJson: return "bad header json";
        case FormatCode::BadEntry: return "bad tensor entry";
        case FormatCode::SizeMismatch: return "size mismatch";
        case FormatCode::Overlap: return "overlapping ranges";
        case FormatCode::Gap: return "payload gap";
        case FormatCode::Truncated: return "truncated payload";
        case FormatCode::TrailingBytes: return "trailing bytes";
    }
    return "format";
}

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::size_t element_count(const Shape& shape) {
    if (shape.empty()) return 0;
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

template <class T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    return a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

template bool bit_equal(const BasicTensor<float>&, const BasicTensor<float>&);
template bool bit_equal(const BasicTensor<double>&, const BasicTensor<double>&);

}  // namespace upscale
