#pragma once

#include "unifin/model.hpp"
#include "unifin/training/checkpoint.hpp"
#include "unifin/training/config.hpp"
#include "unifin/training/data.hpp"
#include "unifin/training/evaluate.hpp"
#include "unifin/training/gradcheck.hpp"
#include "unifin/training/losses.hpp"
#include "unifin/training/optim.hpp"
#include "unifin/training/trainer.hpp"
#include "unifin/training/run.hpp"
