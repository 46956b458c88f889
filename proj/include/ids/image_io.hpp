#ifndef IDS_IMAGE_IO_HPP
#define IDS_IMAGE_IO_HPP

#include "ids/tensor.hpp"

#include <string>

namespace ids {

// 8-bit RGB PNG <-> 1x3xHxW float tensor in [0,1].
// Writing clamps to [0,1] and quantizes round-half-up; reading maps v/255.
Tensor read_png(const std::string& path);
void write_png(const std::string& path, const Tensor& img);

}  // namespace ids

#endif
