#pragma once

#include "duet/checkpoint.hpp"
#include "duet/config.hpp"
#include "duet/data.hpp"
#include "duet/discriminator.hpp"
#include "duet/encoder.hpp"
#include "duet/eval.hpp"
#include "duet/generator.hpp"
#include "duet/gradcheck.hpp"
#include "duet/nn.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"
#include "duet/transfer.hpp"
#include "duet/vocab.hpp"
