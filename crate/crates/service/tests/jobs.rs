//! Job registry invariants under concurrent use, with time driven by hand.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use proptest::prelude::*;
use stutter_service::jobs::{Job, JobRegistry, JobState, ManualClock};

const SESSIONS: [&str; 3] = ["a", "b", "c"];

#[derive(Debug, Clone)]
enum Op {
    Submit(usize),
    Start(usize),
    Progress(usize, f64),
    Finish(usize, bool),
    Tick(i64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..3usize).prop_map(Op::Submit),
        (0..3usize).prop_map(Op::Start),
        ((0..3usize), -0.5..1.5f64).prop_map(|(s, p)| Op::Progress(s, p)),
        ((0..3usize), any::<bool>()).prop_map(|(s, ok)| Op::Finish(s, ok)),
        (0..50i64).prop_map(Op::Tick),
    ]
}

fn apply(jobs: &JobRegistry, clock: &ManualClock, op: &Op) {
    let latest = |s: usize| jobs.latest_for(SESSIONS[s]).map(|j| j.id);
    match *op {
        Op::Submit(s) => {
            let _ = jobs.submit(SESSIONS[s]);
        }
        Op::Start(s) => {
            if let Some(id) = latest(s) {
                jobs.start(&id);
            }
        }
        Op::Progress(s, p) => {
            if let Some(id) = latest(s) {
                jobs.progress(&id, p);
            }
        }
        Op::Finish(s, ok) => {
            if let Some(id) = latest(s) {
                jobs.finish(&id, if ok { Ok(()) } else { Err("boom".into()) });
            }
        }
        Op::Tick(ms) => clock.advance(ms),
    }
}

fn check_snapshot(jobs: &[Job], seen: &mut HashMap<String, Job>) -> Result<(), TestCaseError> {
    for s in SESSIONS {
        let active = jobs
            .iter()
            .filter(|j| j.session_id == s && j.state.is_active())
            .count();
        prop_assert!(active <= 1, "{active} active jobs for {s}");
    }
    for j in jobs {
        prop_assert!((0.0..=1.0).contains(&j.progress));
        prop_assert_eq!(j.progress == 1.0, j.state == JobState::Done);
        prop_assert_eq!(j.error.is_some(), j.state == JobState::Failed);
        if let Some(started) = j.started_at_ms {
            prop_assert!(j.queued_at_ms <= started);
        }
        if let Some(finished) = j.finished_at_ms {
            prop_assert!(j.started_at_ms.unwrap_or(j.queued_at_ms) <= finished);
        }
        if let Some(prev) = seen.get(&j.id) {
            prop_assert!(j.progress >= prev.progress, "progress went back");
            if !prev.state.is_active() {
                prop_assert_eq!(prev, j, "finished jobs never change");
            }
        }
        seen.insert(j.id.clone(), j.clone());
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hammering_keeps_one_active_job_and_monotone_progress(
        scripts in prop::collection::vec(prop::collection::vec(op(), 1..60), 4)
    ) {
        let clock = Arc::new(ManualClock::new(0));
        let jobs = Arc::new(JobRegistry::new(clock.clone()));
        let stop = Arc::new(AtomicBool::new(false));
        let observer = {
            let (jobs, stop) = (jobs.clone(), stop.clone());
            thread::spawn(move || {
                let mut seen = HashMap::new();
                loop {
                    let done = stop.load(Ordering::SeqCst);
                    check_snapshot(&jobs.snapshot(), &mut seen)?;
                    if done {
                        return Ok::<_, TestCaseError>(seen.len());
                    }
                    thread::yield_now();
                }
            })
        };
        let writers: Vec<_> = scripts
            .into_iter()
            .map(|script| {
                let (jobs, clock) = (jobs.clone(), clock.clone());
                thread::spawn(move || script.iter().for_each(|op| apply(&jobs, &clock, op)))
            })
            .collect();
        for w in writers {
            w.join().unwrap();
        }
        stop.store(true, Ordering::SeqCst);
        observer.join().unwrap()?;
    }

    #[test]
    fn sequential_model_matches(script in prop::collection::vec(op(), 1..200)) {
        // a plain model of one session's job lifecycle
        let clock = ManualClock::new(0);
        let jobs = JobRegistry::new(Arc::new(ManualClock::new(0)));
        let mut model: HashMap<usize, (JobState, f64)> = HashMap::new();
        for op in &script {
            apply(&jobs, &clock, op);
            match *op {
                Op::Submit(s) => {
                    let active = model.get(&s).is_some_and(|(st, _)| st.is_active());
                    if !active {
                        model.insert(s, (JobState::Queued, 0.0));
                    }
                }
                Op::Start(s) => {
                    if let Some(e) = model.get_mut(&s) {
                        if e.0 == JobState::Queued {
                            e.0 = JobState::Running;
                        }
                    }
                }
                Op::Progress(s, p) => {
                    if let Some(e) = model.get_mut(&s) {
                        if e.0 == JobState::Running {
                            e.1 = e.1.max(p.clamp(0.0, 0.999));
                        }
                    }
                }
                Op::Finish(s, ok) => {
                    if let Some(e) = model.get_mut(&s) {
                        if e.0.is_active() {
                            *e = if ok { (JobState::Done, 1.0) } else { (JobState::Failed, e.1) };
                        }
                    }
                }
                Op::Tick(_) => {}
            }
            for (s, (state, progress)) in &model {
                let job = jobs.latest_for(SESSIONS[*s]).unwrap();
                prop_assert_eq!((job.state, job.progress), (*state, *progress));
            }
        }
    }
}
