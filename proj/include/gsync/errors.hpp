/*
 Copyright 2026 The gsync Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

     http://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/
#pragma once

#include <stdexcept>
#include <string>

namespace gsync {

/// Base for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class InvalidGroupError : public Error {
 public:
  using Error::Error;
};

class LengthMismatchError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class PlanMismatchError : public Error {
 public:
  using Error::Error;
};

class IndivisibleShardError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NotStartedError : public Error {
 public:
  using Error::Error;
};

class InvalidHandleError : public Error {
 public:
  using Error::Error;
};

class DrainTimeoutError : public Error {
 public:
  using Error::Error;
};

class HandshakeError : public Error {
 public:
  using Error::Error;
};

class ConnectTimeoutError : public Error {
 public:
  using Error::Error;
};

class PeerClosedError : public Error {
 public:
  using Error::Error;
};

class HeaderCorruptError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

}  // namespace gsync
