pub use rolo_core as _core;
