// SPDX-License-Identifier: Apache-2.0

fn main() {
    std::process::exit(easa_tool::run(std::env::args_os()));
}
