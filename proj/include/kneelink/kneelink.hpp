#ifndef KNEELINK_KNEELINK_HPP
#define KNEELINK_KNEELINK_HPP

#include "kneelink/emg.hpp"
#include "kneelink/error.hpp"
#include "kneelink/fusion.hpp"
#include "kneelink/protocol.hpp"
#include "kneelink/session.hpp"
#include "kneelink/simulator.hpp"
#include "kneelink/transport.hpp"
#include "kneelink/service.hpp"
#include "kneelink/http_api.hpp"

#endif  // KNEELINK_KNEELINK_HPP
