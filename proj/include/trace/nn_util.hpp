#pragma once

#include "trace/params.hpp"
#include "trace/tensor.hpp"

namespace trace {

// y = W x + b
template <typename T>
typename GraphT<T>::Var affine(GraphT<T>& g, ParameterT<T>& w, ParameterT<T>& b,
                               typename GraphT<T>::Var x) {
  return g.add(g.matvec(g.param(w), x), g.param(b));
}

// Same affine map with the weights inserted as constants, so gradients flow
// through the map into x but not into the parameters.
template <typename T>
typename GraphT<T>::Var affine_const(GraphT<T>& g, const ParameterT<T>& w, const ParameterT<T>& b,
                                     typename GraphT<T>::Var x) {
  return g.add(g.matvec(g.input(w.value), x), g.input(b.value));
}

}  // namespace trace
