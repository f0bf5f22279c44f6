//! `limits` subcommand: run the resource-limit raiser against the mock OS
//! adapter (default) or, behind an explicit opt-in, the real kernel.

use std::fmt::Write as _;

use threadshim::os_compat::{
    break_resource_limit, LimitTarget, MockAdapter, RealOsAdapter, ResourceKind, RlimitError,
};

pub struct LimitsArgs {
    pub files: u64,
    pub unprivileged: bool,
    pub real_os: bool,
}

pub fn run(args: &LimitsArgs) -> (String, i32) {
    let targets = [LimitTarget {
        resource: ResourceKind::OpenFiles,
        soft: args.files,
        hard: args.files,
    }];
    let mut out = String::new();
    writeln!(
        out,
        "adapter={} files_target={}",
        if args.real_os { "real-os" } else { "mock" },
        args.files
    )
    .unwrap();
    let result = if args.real_os {
        let mut adapter = RealOsAdapter::new();
        break_resource_limit(&mut adapter, &targets)
    } else {
        let mut adapter = if args.unprivileged {
            MockAdapter::unprivileged(1000)
        } else {
            MockAdapter::privileged(1000)
        };
        let r = break_resource_limit(&mut adapter, &targets);
        let hist: Vec<String> = adapter.euid_history().iter().map(|u| u.to_string()).collect();
        writeln!(out, "euid_history={}", hist.join(",")).unwrap();
        r
    };
    match result {
        Ok(reports) => {
            for r in &reports {
                writeln!(out, "{r}").unwrap();
                writeln!(
                    out,
                    "resource={} old_soft={} old_hard={} new_soft={} new_hard={} privilege_dropped={}",
                    r.resource, r.old_soft, r.old_hard, r.new_soft, r.new_hard, r.privilege_dropped
                )
                .unwrap();
            }
            writeln!(out, "result=pass").unwrap();
            (out, 0)
        }
        Err(RlimitError::PartialRaise(report)) => {
            writeln!(out, "{report}").unwrap();
            writeln!(out, "result=partial-raise").unwrap();
            (out, 1)
        }
        Err(e) => {
            writeln!(out, "result=error error=\"{e}\"").unwrap();
            (out, 1)
        }
    }
}
