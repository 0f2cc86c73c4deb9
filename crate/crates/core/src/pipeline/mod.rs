//! Data-manipulation chain of the ingestion resource group: converter,
//! filter, aggregator and archiver. Only the converter and the archiver add
//! stage stamps.

pub mod aggregate;
pub mod archive;
pub mod convert;
pub mod filter;

pub use aggregate::{aggregate, AggregationWindow, Aggregator, Batch, GroupKey};
pub use archive::{destination, ArchiveError, Archived, Archiver};
pub use convert::{convert, ConvertError, ConvertInput};
pub use filter::{apply_filter, FieldPath, FilterError, FilterRule, Predicate};
