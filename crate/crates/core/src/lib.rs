pub mod control;
pub mod design;
pub mod dynamics;
pub mod numerics;
pub mod reach;
pub mod rejuvenation;
pub mod sets;
pub mod sim;
