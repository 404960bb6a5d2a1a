use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::data::DomainDataset;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AccessRecord {
    pub accessor: u32,
    pub owner: u32,
}

/// Counts every raw-sample read, keyed by who read whose data.
#[derive(Debug, Default)]
pub struct AccessAudit {
    reads: Mutex<BTreeMap<AccessRecord, usize>>,
}

impl AccessAudit {
    pub fn new() -> Arc<Self> {
        Arc::new(AccessAudit::default())
    }

    fn record(&self, accessor: u32, owner: u32, rows: usize) {
        let mut reads = self.reads.lock().expect("audit lock poisoned");
        *reads.entry(AccessRecord { accessor, owner }).or_default() += rows;
    }

    pub fn snapshot(&self) -> BTreeMap<AccessRecord, usize> {
        self.reads.lock().expect("audit lock poisoned").clone()
    }

    /// Rows read by someone other than their owner.
    pub fn cross_client_reads(&self) -> usize {
        self.snapshot()
            .iter()
            .filter(|(k, _)| k.accessor != k.owner)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn total_reads(&self) -> usize {
        self.snapshot().values().sum()
    }
}

/// A client's dataset behind an audited accessor. Metadata (sizes, per
/// identity index lists) is free; every sample read is logged.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    owner: u32,
    data: Arc<DomainDataset>,
    audit: Arc<AccessAudit>,
}

impl DatasetHandle {
    pub fn new(owner: u32, data: Arc<DomainDataset>, audit: Arc<AccessAudit>) -> Self {
        DatasetHandle { owner, data, audit }
    }

    pub fn owner(&self) -> u32 {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn identity_count(&self) -> usize {
        self.data.identity_count
    }

    /// Index metadata used by the batch sampler.
    pub fn layout(&self) -> &DomainDataset {
        &self.data
    }

    pub fn read(&self, accessor: u32, indices: &[usize]) -> (Matrix, Vec<u32>) {
        self.audit.record(accessor, self.owner, indices.len());
        self.data.gather(indices)
    }

    pub fn read_all(&self, accessor: u32) -> (Matrix, Vec<u32>) {
        self.audit.record(accessor, self.owner, self.data.len());
        (self.data.samples.clone(), self.data.labels.clone())
    }
}
