#include "stylemine/tensor.hpp"

namespace stylemine {

template struct TensorT<float>;
template struct TensorT<double>;

}  // namespace stylemine
