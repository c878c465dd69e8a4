use std::sync::atomic::Ordering;
use std::sync::Arc;

use tabletop_agent::agent::{AgentConfig, AgentContext};
use tabletop_agent::llm::{Audited, EndpointConfig, MockBackend, MockServer, OpenAiCompatible};
use tabletop_agent::tasks::{TaskId, TaskRegistry};

fn drive(agent: &mut AgentContext) {
    for task in TaskId::ALL {
        agent.command_task(task).unwrap();
        agent.run_slots(agent.registry().intervention_index(task)).unwrap();
    }
    for task in TaskId::ALL {
        agent.command_task(task).unwrap();
        assert!(agent.run_to_completion().unwrap().completed, "{task}");
        agent.probe_retention(task).unwrap();
    }
}

#[test]
fn http_shim_is_indistinguishable_from_the_in_process_mock() {
    let registry = Arc::new(TaskRegistry::builtin());
    let mut direct = AgentContext::new(
        registry.clone(),
        AgentConfig::default(),
        Box::new(MockBackend::oracle()),
        Box::new(MockBackend::oracle()),
    );
    drive(&mut direct);

    let coordinator = MockServer::start("127.0.0.1:0", MockBackend::oracle()).unwrap();
    let worker = MockServer::start("127.0.0.1:0", MockBackend::oracle()).unwrap();
    let mut remote = AgentContext::new(
        registry,
        AgentConfig::default(),
        Box::new(OpenAiCompatible::new(EndpointConfig::new(coordinator.base_url(), "shim"))),
        Box::new(OpenAiCompatible::new(EndpointConfig::new(worker.base_url(), "shim"))),
    );
    drive(&mut remote);

    assert_eq!(direct.events_ndjson(), remote.events_ndjson());
    assert_eq!(direct.transcript(), remote.transcript());
}

#[test]
fn memory_calls_reach_the_worker_only_when_enabled() {
    for memory in [true, false] {
        let (worker, calls) = Audited::new(MockBackend::oracle());
        let mut agent = AgentContext::new(
            Arc::new(TaskRegistry::builtin()),
            AgentConfig {
                memory_enabled: memory,
                ..AgentConfig::default()
            },
            Box::new(MockBackend::oracle()),
            Box::new(worker),
        );
        drive(&mut agent);
        let n = calls.load(Ordering::SeqCst);
        if memory {
            assert!(n > 0);
        } else {
            assert_eq!(n, 0);
        }
    }
}

#[test]
fn transcript_replays_through_a_trace_to_the_same_world() {
    let registry = Arc::new(TaskRegistry::builtin());
    let mut live = AgentContext::new(
        registry.clone(),
        AgentConfig::default(),
        Box::new(MockBackend::oracle()),
        Box::new(MockBackend::oracle()),
    );
    drive(&mut live);
    let replies = tabletop_agent::config::parse_trace(&live.transcript()).unwrap();
    let mut replay = AgentContext::new(
        registry,
        AgentConfig::default(),
        Box::new(MockBackend::trace(replies)),
        Box::new(MockBackend::oracle()),
    );
    drive(&mut replay);
    for task in TaskId::ALL {
        assert_eq!(live.world_if_started(task), replay.world_if_started(task));
        assert_eq!(live.log(task), replay.log(task));
    }
}
