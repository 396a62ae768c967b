#pragma once

#include "capsfor/adam.hpp"
#include "capsfor/capsule.hpp"
#include "capsfor/config.hpp"
#include "capsfor/dataset.hpp"
#include "capsfor/errors.hpp"
#include "capsfor/gradcheck.hpp"
#include "capsfor/image_io.hpp"
#include "capsfor/kernels.hpp"
#include "capsfor/layers.hpp"
#include "capsfor/metrics.hpp"
#include "capsfor/ops.hpp"
#include "capsfor/pipeline.hpp"
#include "capsfor/report.hpp"
#include "capsfor/rng.hpp"
#include "capsfor/tape.hpp"
#include "capsfor/tensor.hpp"
#include "capsfor/toy_data.hpp"
#include "capsfor/training.hpp"
#include "capsfor/vgg.hpp"
#include "capsfor/weights.hpp"
