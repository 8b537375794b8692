#pragma once

#include "core.hpp"
#include "volume.hpp"
#include "transform.hpp"
#include "losses.hpp"
#include "random.hpp"
#include "net/layers.hpp"
#include "net/block.hpp"
#include "net/serialize.hpp"
#include "optim.hpp"
#include "chain.hpp"
#include "training.hpp"
#include "gradcheck.hpp"
#include "pipeline.hpp"
#include "phantom.hpp"
#include "eval.hpp"
#include "io/binary.hpp"
#include "io/frv.hpp"
#include "io/nifti.hpp"
