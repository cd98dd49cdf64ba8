// SPDX-License-Identifier: Apache-2.0

//! The embedding API and reference services.

use thiserror::Error;

use crate::hypercall::{HypercallNr, HypercallPolicy};
use crate::image::VirtineImage;
use crate::runtime::{Invocation, RunReport, Runtime, VirtineError};

pub mod http;
pub mod marshal;
pub mod service;

pub use marshal::{ArgCodec, CodecError, FieldType, StructLayout, Value};
pub use service::{serve_echo, serve_http, RequestRecord, ServiceConfig, ServiceError, ServiceHandle};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot encode arguments: {0}")]
    Encode(CodecError),
    #[error("cannot decode return value: {0}")]
    Decode(CodecError),
    #[error(transparent)]
    Virtine(#[from] VirtineError),
}

/// A function that runs in a fresh virtine on every call.
///
/// Calls are copy-restore: arguments are encoded into an owned buffer before
/// anything runs, and results are decoded from a copy.
#[derive(Clone, Debug)]
pub struct VirtineFunction {
    pub image: VirtineImage,
    pub policy: HypercallPolicy,
    pub snapshot_enabled: bool,
    pub arg_codec: ArgCodec,
    pub ret_codec: ArgCodec,
}

impl VirtineFunction {
    /// Raw bytes in and out, snapshots on.
    pub fn new(image: VirtineImage, policy: HypercallPolicy) -> Self {
        VirtineFunction {
            image,
            policy,
            snapshot_enabled: true,
            arg_codec: ArgCodec::RawBytes,
            ret_codec: ArgCodec::RawBytes,
        }
    }

    pub fn args(mut self, codec: ArgCodec) -> Self {
        self.arg_codec = codec;
        self
    }

    pub fn returns(mut self, codec: ArgCodec) -> Self {
        self.ret_codec = codec;
        self
    }

    pub fn snapshot(mut self, enabled: bool) -> Self {
        self.snapshot_enabled = enabled;
        if enabled {
            self.policy = self.policy.with(HypercallNr::Snapshot);
        }
        self
    }

    pub fn call(&self, rt: &Runtime, args: &[Value]) -> Result<Vec<Value>, ClientError> {
        let report = self.call_report(rt, args)?;
        self.ret_codec.decode(&report.data).map_err(ClientError::Decode)
    }

    /// Like [`call`](Self::call) but returns the full run report.
    pub fn call_report(&self, rt: &Runtime, args: &[Value]) -> Result<RunReport, ClientError> {
        let encoded = self.arg_codec.encode(args).map_err(ClientError::Encode)?;
        let inv = Invocation::new(&self.image, &encoded, &self.policy).snapshot(self.snapshot_enabled);
        Ok(rt.invoke(inv)?)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backend::mock::{programs, MockBackend};
    use crate::backend::MIN_MEM_SIZE;
    use crate::platform::ProcessorMode;

    fn rt() -> Runtime {
        Runtime::new(Arc::new(MockBackend::new()), 4)
    }

    fn fib_fn() -> VirtineFunction {
        VirtineFunction::new(
            MockBackend::image(programs::FIB, ProcessorMode::Long64, MIN_MEM_SIZE),
            HypercallPolicy::builder().allow(HypercallNr::ReturnData).build(),
        )
        .args(ArgCodec::PackedStruct(StructLayout::new().field("n", FieldType::I32)))
        .returns(ArgCodec::PackedStruct(StructLayout::new().field("result", FieldType::U64)))
    }

    #[test]
    fn fib_25() {
        let out = fib_fn().call(&rt(), &[Value::I32(25)]).unwrap();
        assert_eq!(out, [Value::U64(programs::fib(25))]);
    }

    #[test]
    fn raw_identity() {
        let f = VirtineFunction::new(
            MockBackend::image(programs::IDENTITY, ProcessorMode::Long64, MIN_MEM_SIZE),
            HypercallPolicy::builder()
                .allow(HypercallNr::GetData)
                .allow(HypercallNr::ReturnData)
                .build(),
        );
        let out = f.call(&rt(), &[Value::Bytes(b"hello".to_vec())]).unwrap();
        assert_eq!(out, [Value::Bytes(b"hello".to_vec())]);
    }

    #[test]
    fn oversized_args_fail_before_acquire() {
        let rt = rt();
        let f = VirtineFunction::new(
            MockBackend::image(programs::IDENTITY, ProcessorMode::Long64, MIN_MEM_SIZE),
            HypercallPolicy::deny_all(),
        );
        let err = f.call(&rt, &[Value::Bytes(vec![0; 5000])]).unwrap_err();
        assert!(matches!(err, ClientError::Virtine(VirtineError::ArgsTooLarge { .. })));
        assert_eq!(rt.pool().stats().acquires(), 0);
    }

    #[test]
    fn bad_arguments_and_returns() {
        let rt = rt();
        assert!(matches!(fib_fn().call(&rt, &[Value::U8(1)]), Err(ClientError::Encode(_))));
        let wrong_ret = fib_fn().returns(ArgCodec::PackedStruct(StructLayout::new().field("r", FieldType::U32)));
        assert!(matches!(wrong_ret.call(&rt, &[Value::I32(3)]), Err(ClientError::Decode(_))));
    }
}
