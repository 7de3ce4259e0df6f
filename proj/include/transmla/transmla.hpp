#pragma once

#include "transmla/errors.hpp"
#include "transmla/matrix.hpp"
#include "transmla/linalg.hpp"
#include "transmla/rng.hpp"
#include "transmla/rope.hpp"
#include "transmla/attention.hpp"
#include "transmla/rewrites.hpp"
#include "transmla/rorope.hpp"
#include "transmla/bkv.hpp"
#include "transmla/tensor_io.hpp"
#include "transmla/synth.hpp"
#include "transmla/layer.hpp"
#include "transmla/bundle.hpp"
#include "transmla/report.hpp"
#include "transmla/bench.hpp"
#include "transmla/pipeline.hpp"
