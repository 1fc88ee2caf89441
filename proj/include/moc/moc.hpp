#pragma once

#include "moc/attention.hpp"
#include "moc/cost_model.hpp"
#include "moc/errors.hpp"
#include "moc/inputs.hpp"
#include "moc/outer_router.hpp"
#include "moc/router.hpp"
#include "moc/tensor.hpp"
#include "moc/token_lattice.hpp"
#include "moc/workbench/commands.hpp"
#include "moc/workbench/routing_csv.hpp"
#include "moc/workbench/scene.hpp"
#include "moc/workbench/schedule.hpp"
