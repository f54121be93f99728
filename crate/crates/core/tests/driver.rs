use spw_core::driver::SPW_HARDWARE_ID;
use spw_core::ioctl::{decode_response, encode_command, Guid, SpwCommand, SpwResponse};
use spw_core::kernel::Irql;
use spw_core::testbed::{Testbed, TestbedConfig};
use spw_core::wdf::{parse_install_manifest, FrameworkError, IoRequest, MajorFunction, QueueKind, Status};

fn call(tb: &mut Testbed, cmd: &SpwCommand) -> Result<SpwResponse, Status> {
    let (word, input) = encode_command(cmd).unwrap();
    let r = tb
        .dispatch(IoRequest::device_control(word, input, cmd.output_len()))
        .unwrap();
    if r.status.is_success() {
        assert_eq!(r.bytes_returned, r.output.len());
        Ok(decode_response(cmd, &r.output).unwrap())
    } else {
        assert!(r.output.is_empty());
        Err(r.status)
    }
}

#[test]
fn bar0_address() {
    let mut tb = Testbed::new(TestbedConfig::default()).unwrap();
    assert_eq!(
        call(&mut tb, &SpwCommand::GetBar0Addr),
        Ok(SpwResponse::Bar0Addr { phys: 0xD210_0000 })
    );
    let cfg = TestbedConfig {
        bar0_base: 0xE000_0000,
        ..TestbedConfig::default()
    };
    let mut tb = Testbed::new(cfg).unwrap();
    assert_eq!(
        call(&mut tb, &SpwCommand::GetBar0Addr),
        Ok(SpwResponse::Bar0Addr { phys: 0xE000_0000 })
    );
}

#[test]
fn queue_setup() {
    let tb = Testbed::new(TestbedConfig::default()).unwrap();
    assert_eq!(tb.framework().queue_irql(tb.device(), QueueKind::IoControl), Some(Irql::Dispatch));
    assert_eq!(tb.framework().queue_irql(tb.device(), QueueKind::Read), None);
    assert_eq!(tb.config().driver.hardware_id, SPW_HARDWARE_ID);
}

#[test]
fn link_commands() {
    let mut tb = Testbed::new(TestbedConfig::default()).unwrap();
    assert_eq!(call(&mut tb, &SpwCommand::PortDiscovery), Ok(SpwResponse::PortMask { mask: 0 }));
    call(&mut tb, &SpwCommand::LinkEnable { port: 1 }).unwrap();
    call(&mut tb, &SpwCommand::LinkEnable { port: 3 }).unwrap();
    assert_eq!(tb.register_snapshot().registers["LINK_ENABLE"], 0b101);
    tb.tick(5);
    assert_eq!(call(&mut tb, &SpwCommand::PortDiscovery), Ok(SpwResponse::PortMask { mask: 0x05 }));
    call(&mut tb, &SpwCommand::LinkReset { port: 1 }).unwrap();
    assert_eq!(call(&mut tb, &SpwCommand::PortDiscovery), Ok(SpwResponse::PortMask { mask: 0x04 }));
    // enabling twice is harmless
    call(&mut tb, &SpwCommand::LinkEnable { port: 3 }).unwrap();
    assert_eq!(tb.register_snapshot().registers["LINK_ENABLE"], 0b101);

    for port in [0, 4, u32::MAX] {
        assert_eq!(call(&mut tb, &SpwCommand::LinkEnable { port }), Err(Status::InvalidParameter));
        assert_eq!(call(&mut tb, &SpwCommand::LinkReset { port }), Err(Status::InvalidParameter));
    }
}

#[test]
fn request_errors() {
    let mut tb = Testbed::new(TestbedConfig::default()).unwrap();
    let r = tb.dispatch(IoRequest::device_control(0x8000_2040, vec![], 16)).unwrap();
    assert_eq!(r.status, Status::NotSupported);
    let r = tb.dispatch(IoRequest::device_control(0x8000_2004, vec![1, 2], 4)).unwrap();
    assert_eq!(r.status, Status::InvalidParameter);
    let (word, input) = encode_command(&SpwCommand::GetBar0Addr).unwrap();
    let r = tb.dispatch(IoRequest::device_control(word, input, 4)).unwrap();
    assert_eq!(r.status, Status::BufferTooSmall);

    let mut read = IoRequest::device_control(0, vec![], 4);
    read.major = MajorFunction::Read;
    assert!(matches!(tb.dispatch(read), Err(FrameworkError::NoQueueForRequest(MajorFunction::Read))));

    tb.unplug().unwrap();
    assert!(matches!(
        tb.dispatch(IoRequest::device_control(word, vec![], 8)),
        Err(FrameworkError::DeviceNotStarted(_))
    ));
}

#[test]
fn manifest_guid_binds_interface() {
    let text = "[Version]\r\nClass=Multifunction\r\nProvider=SpwLab\r\nDriverVer=06/01/2014,1.0.0.0\r\n\r\n[Interface]\r\nGuid={0E3B6F4C-9A51-4D2E-8C07-55AA33CC1122}\r\n";
    let manifest = parse_install_manifest(text).unwrap();
    let mut cfg = TestbedConfig::default();
    cfg.driver.interface_guid = manifest.interface_guid;
    let tb = Testbed::new(cfg).unwrap();
    let (dev, _) = tb.framework().lookup_interface(&manifest.interface_guid).unwrap();
    assert_eq!(dev, tb.device());
    let other: Guid = "00000000-0000-4000-8000-000000000000".parse().unwrap();
    assert!(tb.framework().lookup_interface(&other).is_err());
}
