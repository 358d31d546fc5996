//! Runs container logic as a local child process.
//!
//! The `image` is an executable path (or a name resolved on `PATH`). Each
//! child gets its own process group so a kill reaches anything it spawned.

use std::env;
use std::fs::{self, File};
use std::io;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::{
    build_invocation, verify_outputs, AttemptContext, Backend, ExecError, OutputDestinations,
    ProcessHandle, ResolvedInputs, Termination,
};
use crate::model::{Slot, TransformLogic};

#[derive(Debug, Default, Clone)]
pub struct LocalBackend;

impl LocalBackend {
    pub fn new() -> Self {
        LocalBackend
    }
}

fn resolve_image(image: &str) -> Option<PathBuf> {
    if image.contains('/') {
        let p = PathBuf::from(image);
        return p.is_file().then_some(p);
    }
    env::var_os("PATH").and_then(|paths| {
        env::split_paths(&paths)
            .map(|dir| dir.join(image))
            .find(|p| p.is_file())
    })
}

impl Backend for LocalBackend {
    fn name(&self) -> &'static str {
        "local"
    }

    fn execute(
        &self,
        ctx: &AttemptContext,
        logic: &TransformLogic,
        inputs: &ResolvedInputs,
        outputs: &OutputDestinations,
    ) -> Result<Box<dyn ProcessHandle>, ExecError> {
        let TransformLogic::Container(container) = logic else {
            return Err(ExecError::Unsupported {
                backend: "local",
                logic: logic.kind(),
            });
        };
        let program = resolve_image(&container.image)
            .ok_or_else(|| ExecError::ImageNotFound(container.image.clone()))?;
        let inv = build_invocation(container, inputs, outputs)?;

        let spawn_err = |e: io::Error| ExecError::SpawnFailure(e.to_string());
        fs::create_dir_all(&ctx.scratch).map_err(spawn_err)?;
        let stdout = File::create(ctx.dir.join("stdout.log")).map_err(spawn_err)?;
        let stderr = File::create(ctx.dir.join("stderr.log")).map_err(spawn_err)?;

        let mut cmd = Command::new(&program);
        cmd.arg0(&inv.argv[0])
            .args(&inv.argv[1..])
            .envs(&inv.env)
            .current_dir(&ctx.scratch)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .process_group(0);
        let child = cmd.spawn().map_err(spawn_err)?;
        Ok(Box::new(LocalProcess::start(
            format!("{}#{}:{}", ctx.step, ctx.attempt, child.id()),
            child,
            ctx.outputs.clone(),
            outputs.clone(),
            ctx.grace,
        )))
    }
}

#[derive(Default)]
struct State {
    /// The leader has exited (it may not be reaped yet).
    exited: bool,
    kill_requested: bool,
    result: Option<Termination>,
}

struct Shared {
    pid: i32,
    state: Mutex<State>,
    changed: Condvar,
}

impl Shared {
    fn signal_group(&self, sig: i32) {
        // SAFETY: plain syscall; the group leader is either running or an
        // unreaped zombie, so the pgid cannot have been recycled.
        unsafe {
            libc::kill(-self.pid, sig);
        }
    }
}

pub struct LocalProcess {
    id: String,
    shared: Arc<Shared>,
    grace: Duration,
}

impl LocalProcess {
    fn start(
        id: String,
        mut child: Child,
        slots: Vec<Slot>,
        outputs: OutputDestinations,
        grace: Duration,
    ) -> Self {
        let shared = Arc::new(Shared {
            pid: child.id() as i32,
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
        });
        let waiter = shared.clone();
        std::thread::Builder::new()
            .name(format!("wait-{}", child.id()))
            .spawn(move || {
                wait_without_reaping(waiter.pid);
                let kill_requested = {
                    let mut st = waiter.state.lock().unwrap();
                    st.exited = true;
                    waiter.changed.notify_all();
                    st.kill_requested
                };
                // stragglers in the group die with the leader
                waiter.signal_group(libc::SIGKILL);
                let status = child.wait();
                let result = if kill_requested {
                    Termination::Killed
                } else {
                    match status {
                        Ok(s) if s.success() => match verify_outputs(&slots, &outputs) {
                            Ok(()) => Termination::Succeeded,
                            Err(reason) => Termination::Failed(reason),
                        },
                        Ok(s) => Termination::Failed(format!("process exited with {s}")),
                        Err(e) => Termination::Failed(format!("wait failed: {e}")),
                    }
                };
                let mut st = waiter.state.lock().unwrap();
                st.result = Some(result);
                waiter.changed.notify_all();
            })
            .expect("spawn waiter thread");
        LocalProcess { id, shared, grace }
    }

    pub fn pid(&self) -> i32 {
        self.shared.pid
    }
}

fn wait_without_reaping(pid: i32) {
    loop {
        // SAFETY: zeroed siginfo is a valid out-parameter for waitid.
        let mut info: libc::siginfo_t = unsafe { std::mem::zeroed() };
        let rc = unsafe {
            libc::waitid(
                libc::P_PID,
                pid as libc::id_t,
                &mut info,
                libc::WEXITED | libc::WNOWAIT,
            )
        };
        if rc == 0 || io::Error::last_os_error().kind() != io::ErrorKind::Interrupted {
            return;
        }
    }
}

impl ProcessHandle for LocalProcess {
    fn id(&self) -> &str {
        &self.id
    }

    fn wait(&self) -> Termination {
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if let Some(r) = &st.result {
                return r.clone();
            }
            st = self.shared.changed.wait(st).unwrap();
        }
    }

    fn poll(&self) -> Option<Termination> {
        self.shared.state.lock().unwrap().result.clone()
    }

    fn kill(&self) {
        {
            let mut st = self.shared.state.lock().unwrap();
            if st.exited || st.kill_requested {
                return;
            }
            st.kill_requested = true;
            self.shared.signal_group(libc::SIGTERM);
        }
        let shared = self.shared.clone();
        let grace = self.grace;
        std::thread::spawn(move || {
            let st = shared.state.lock().unwrap();
            let (st, _) = shared
                .changed
                .wait_timeout_while(st, grace, |s| !s.exited)
                .unwrap();
            if !st.exited {
                shared.signal_group(libc::SIGKILL);
            }
        });
    }
}

impl Drop for LocalProcess {
    fn drop(&mut self) {
        let st = self.shared.state.lock().unwrap();
        if !st.exited {
            self.shared.signal_group(libc::SIGKILL);
        }
    }
}

/// True when a process with this pid still exists (zombies included).
pub fn process_exists(pid: i32) -> bool {
    Path::new(&format!("/proc/{pid}")).exists()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Locator;
    use crate::model::{ContainerBinding, ContainerLogic, Resource};
    use std::collections::BTreeMap;
    use std::time::Instant;

    fn ctx(dir: &Path, outputs: Vec<Slot>) -> AttemptContext {
        fs::create_dir_all(dir).unwrap();
        AttemptContext {
            step: "s".into(),
            attempt: 1,
            dir: dir.to_path_buf(),
            scratch: dir.join("scratch"),
            inputs: vec![],
            outputs,
            grace: Duration::from_millis(500),
        }
    }

    fn container(image: &str, flags: &[&str]) -> TransformLogic {
        TransformLogic::Container(ContainerLogic {
            image: image.into(),
            flags: flags
                .iter()
                .map(|f| crate::model::ContainerFlag {
                    name: f.to_string(),
                    value: None,
                })
                .collect(),
            ..Default::default()
        })
    }

    #[test]
    fn cp_with_positional_bindings() {
        let d = tempfile::tempdir().unwrap();
        let src = d.path().join("in.txt");
        fs::write(&src, b"copy me").unwrap();
        let dst = d.path().join("out.txt");
        let logic = TransformLogic::Container(ContainerLogic {
            image: "/bin/cp".into(),
            inputs: vec![ContainerBinding {
                name: "src".into(),
                flag: Some(String::new()),
                ..Default::default()
            }],
            outputs: vec![ContainerBinding {
                name: "dst".into(),
                flag: Some(String::new()),
                ..Default::default()
            }],
            ..Default::default()
        });
        let outs = BTreeMap::from([("dst".to_string(), Locator::Path(dst.clone()))]);
        let ins = BTreeMap::from([("src".to_string(), Locator::Path(src))]);
        let c = ctx(&d.path().join("attempt"), vec![Slot::new("dst", Resource::file())]);
        let h = LocalBackend.execute(&c, &logic, &ins, &outs).unwrap();
        assert_eq!(h.wait(), Termination::Succeeded);
        assert_eq!(h.wait(), Termination::Succeeded);
        assert_eq!(fs::read(dst).unwrap(), b"copy me");
    }

    #[test]
    fn missing_output_downgrades_to_failed() {
        let d = tempfile::tempdir().unwrap();
        let outs = BTreeMap::from([("o".to_string(), Locator::Path(d.path().join("never")))]);
        let c = ctx(&d.path().join("a"), vec![Slot::new("o", Resource::file())]);
        let h = LocalBackend
            .execute(&c, &container("/bin/true", &[]), &BTreeMap::new(), &outs)
            .unwrap();
        assert!(matches!(h.wait(), Termination::Failed(r) if r.contains("MissingOutput")));
    }

    #[test]
    fn nonzero_exit_fails() {
        let d = tempfile::tempdir().unwrap();
        let c = ctx(d.path(), vec![]);
        let h = LocalBackend
            .execute(&c, &container("false", &[]), &BTreeMap::new(), &BTreeMap::new())
            .unwrap();
        assert!(matches!(h.wait(), Termination::Failed(_)));
    }

    #[test]
    fn kill_reports_killed_and_reaps() {
        let d = tempfile::tempdir().unwrap();
        let c = ctx(d.path(), vec![]);
        let logic = TransformLogic::Container(ContainerLogic {
            image: "sleep".into(),
            flags: vec![],
            ..Default::default()
        });
        // sleep takes a positional duration; pass it through env-free flags
        let TransformLogic::Container(mut k) = logic else { unreachable!() };
        k.inputs.push(ContainerBinding {
            name: "secs".into(),
            flag: Some(String::new()),
            ..Default::default()
        });
        let ins = BTreeMap::from([("secs".to_string(), Locator::Path("30".into()))]);
        let h = LocalBackend
            .execute(&c, &TransformLogic::Container(k), &ins, &BTreeMap::new())
            .unwrap();
        let pid: i32 = h.id().rsplit(':').next().unwrap().parse().unwrap();
        let start = Instant::now();
        h.kill();
        h.kill();
        assert_eq!(h.wait(), Termination::Killed);
        assert!(start.elapsed() < Duration::from_secs(5));
        assert!(!process_exists(pid));
    }

    #[test]
    fn kill_escalates_when_term_is_ignored() {
        let d = tempfile::tempdir().unwrap();
        let mut c = ctx(d.path(), vec![]);
        c.grace = Duration::from_millis(100);
        let logic = TransformLogic::Container(ContainerLogic {
            image: "/bin/sh".into(),
            inputs: vec![ContainerBinding {
                name: "script".into(),
                flag: Some("".into()),
                ..Default::default()
            }],
            ..Default::default()
        });
        // `sh -c`-free: the positional argument is a script file
        let script = d.path().join("ignore.sh");
        fs::write(&script, "trap '' TERM\nwhile true; do sleep 0.05; done\n").unwrap();
        let ins = BTreeMap::from([("script".to_string(), Locator::Path(script))]);
        let h = LocalBackend.execute(&c, &logic, &ins, &BTreeMap::new()).unwrap();
        std::thread::sleep(Duration::from_millis(100));
        let start = Instant::now();
        h.kill();
        assert_eq!(h.wait(), Termination::Killed);
        assert!(start.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn unknown_image() {
        let d = tempfile::tempdir().unwrap();
        let c = ctx(d.path(), vec![]);
        assert!(matches!(
            LocalBackend.execute(&c, &container("/no/such/bin", &[]), &BTreeMap::new(), &BTreeMap::new()),
            Err(ExecError::ImageNotFound(_))
        ));
    }

    #[test]
    fn logs_captured() {
        let d = tempfile::tempdir().unwrap();
        let c = ctx(d.path(), vec![]);
        let h = LocalBackend
            .execute(&c, &container("echo", &["hello"]), &BTreeMap::new(), &BTreeMap::new())
            .unwrap();
        assert_eq!(h.wait(), Termination::Succeeded);
        assert_eq!(fs::read_to_string(d.path().join("stdout.log")).unwrap(), "--hello\n");
    }
}
