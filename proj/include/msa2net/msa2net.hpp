#pragma once

#include "msa2net/analysis.hpp"
#include "msa2net/blocks.hpp"
#include "msa2net/common.hpp"
#include "msa2net/conv.hpp"
#include "msa2net/data.hpp"
#include "msa2net/fft.hpp"
#include "msa2net/io.hpp"
#include "msa2net/masag.hpp"
#include "msa2net/metrics.hpp"
#include "msa2net/network.hpp"
#include "msa2net/ops.hpp"
#include "msa2net/tensor.hpp"
#include "msa2net/training.hpp"
