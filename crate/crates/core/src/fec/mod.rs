//! Forward error correction: CRC, segmentation, LDPC encoding and
//! belief-propagation decoding.

pub mod code;
pub mod crc;
pub mod decoder;
pub mod matrix;
pub mod segment;

pub use code::{encode_codeblock, LdpcCode};
pub use crc::{attach_crc, crc_check, Crc24, CRC_LEN};
pub use decoder::{run_iteration, BpVariant, DecoderConfig, DecoderState, Schedule};
pub use matrix::ParityCheckMatrix;
pub use segment::{desegment, segment_transport_block, CodeBlock, MAX_CB_BITS};
