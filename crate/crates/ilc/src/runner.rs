use ilc_core::probe::JobRunner;
use rayon::prelude::*;

/// Rayon pool of a fixed size. Results come back in job order whatever the
/// completion order.
pub struct Pool {
    pool: rayon::ThreadPool,
}

impl Pool {
    pub fn new(jobs: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .expect("thread pool");
        Self { pool }
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl JobRunner for Pool {
    fn run<J: Sync, R: Send, F: Fn(&J) -> R + Sync + Send>(&self, jobs: &[J], f: F) -> Vec<R> {
        self.pool.install(|| jobs.par_iter().map(&f).collect())
    }
}
