// SPDX-License-Identifier: Apache-2.0

pub mod augment;
pub mod container;
pub mod embedding;
pub mod entropy;
pub mod experiment;
pub mod ids;
pub mod image;
pub mod matching;
pub mod parallel;
pub mod structure;
pub mod synth;
pub mod train;
