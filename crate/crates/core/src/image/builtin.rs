// SPDX-License-Identifier: Apache-2.0

//! Hand-assembled guests for the hardware backend.
//!
//! These let the hardware tests and benchmarks run without a guest
//! toolchain. Each listing is the disassembly at the load address; every
//! hypercall uses the frame at 0x7f00 and data slot at 0x7f40.

/// `out %al, $0xff` then `hlt`.
//  8000  out    %al,$0xff
//  8002  hlt
pub const OUT_HLT: &[u8] = &[
    0xe6, 0xff, 0xf4,
];

/// Recursive fib in 16-bit real mode.
//  8000  mov    0x0,%edi
//  8005  call   0x806b
//  8008  mov    %eax,0x7f40
//  800c  movl   $0x0,0x7f44
//  8015  movl   $0x3,0x7f00
//  801e  movl   $0x0,0x7f04
//  8027  movl   $0x7f40,0x7f08
//  8030  movl   $0x0,0x7f0c
//  8039  movl   $0x8,0x7f10
//  8042  movl   $0x0,0x7f14
//  804b  mov    $0xff,%dx
//  804e  mov    $0x7f00,%eax
//  8054  out    %eax,(%dx)
//  8056  movl   $0x0,0x7f00
//  805f  movl   $0x0,0x7f08
//  8068  out    %eax,(%dx)
//  806a  hlt
//  806b  cmp    $0x2,%edi
//  806f  jl     0x808c
//  8071  push   %ebx
//  8073  push   %edi
//  8075  dec    %edi
//  8077  call   0x806b
//  807a  mov    %eax,%ebx
//  807d  pop    %edi
//  807f  sub    $0x2,%edi
//  8083  call   0x806b
//  8086  add    %ebx,%eax
//  8089  pop    %ebx
//  808b  ret
//  808c  mov    %edi,%eax
//  808f  ret
pub const FIB16: &[u8] = &[
    0x66, 0x8b, 0x3e, 0x00, 0x00, 0xe8, 0x63, 0x00, 0x66, 0xa3, 0x40, 0x7f,
    0x66, 0xc7, 0x06, 0x44, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x66, 0xc7, 0x06,
    0x00, 0x7f, 0x03, 0x00, 0x00, 0x00, 0x66, 0xc7, 0x06, 0x04, 0x7f, 0x00,
    0x00, 0x00, 0x00, 0x66, 0xc7, 0x06, 0x08, 0x7f, 0x40, 0x7f, 0x00, 0x00,
    0x66, 0xc7, 0x06, 0x0c, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x66, 0xc7, 0x06,
    0x10, 0x7f, 0x08, 0x00, 0x00, 0x00, 0x66, 0xc7, 0x06, 0x14, 0x7f, 0x00,
    0x00, 0x00, 0x00, 0xba, 0xff, 0x00, 0x66, 0xb8, 0x00, 0x7f, 0x00, 0x00,
    0x66, 0xef, 0x66, 0xc7, 0x06, 0x00, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x66,
    0xc7, 0x06, 0x08, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x66, 0xef, 0xf4, 0x66,
    0x83, 0xff, 0x02, 0x7c, 0x1b, 0x66, 0x53, 0x66, 0x57, 0x66, 0x4f, 0xe8,
    0xf1, 0xff, 0x66, 0x89, 0xc3, 0x66, 0x5f, 0x66, 0x83, 0xef, 0x02, 0xe8,
    0xe5, 0xff, 0x66, 0x01, 0xd8, 0x66, 0x5b, 0xc3, 0x66, 0x89, 0xf8, 0xc3,
];

/// Recursive fib in 32-bit protected mode, no paging.
//  8000  mov    0x0,%edi
//  8006  call   0x8076
//  800b  mov    %eax,0x7f40
//  8010  movl   $0x0,0x7f44
//  801a  movl   $0x3,0x7f00
//  8024  movl   $0x0,0x7f04
//  802e  movl   $0x7f40,0x7f08
//  8038  movl   $0x0,0x7f0c
//  8042  movl   $0x8,0x7f10
//  804c  movl   $0x0,0x7f14
//  8056  mov    $0xff,%dx
//  805a  mov    $0x7f00,%eax
//  805f  out    %eax,(%dx)
//  8060  movl   $0x0,0x7f00
//  806a  movl   $0x0,0x7f08
//  8074  out    %eax,(%dx)
//  8075  hlt
//  8076  cmp    $0x2,%edi
//  8079  jl     0x8092
//  807b  push   %ebx
//  807c  push   %edi
//  807d  dec    %edi
//  807e  call   0x8076
//  8083  mov    %eax,%ebx
//  8085  pop    %edi
//  8086  sub    $0x2,%edi
//  8089  call   0x8076
//  808e  add    %ebx,%eax
//  8090  pop    %ebx
//  8091  ret
//  8092  mov    %edi,%eax
//  8094  ret
pub const FIB32: &[u8] = &[
    0x8b, 0x3d, 0x00, 0x00, 0x00, 0x00, 0xe8, 0x6b, 0x00, 0x00, 0x00, 0xa3,
    0x40, 0x7f, 0x00, 0x00, 0xc7, 0x05, 0x44, 0x7f, 0x00, 0x00, 0x00, 0x00,
    0x00, 0x00, 0xc7, 0x05, 0x00, 0x7f, 0x00, 0x00, 0x03, 0x00, 0x00, 0x00,
    0xc7, 0x05, 0x04, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xc7, 0x05,
    0x08, 0x7f, 0x00, 0x00, 0x40, 0x7f, 0x00, 0x00, 0xc7, 0x05, 0x0c, 0x7f,
    0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xc7, 0x05, 0x10, 0x7f, 0x00, 0x00,
    0x08, 0x00, 0x00, 0x00, 0xc7, 0x05, 0x14, 0x7f, 0x00, 0x00, 0x00, 0x00,
    0x00, 0x00, 0x66, 0xba, 0xff, 0x00, 0xb8, 0x00, 0x7f, 0x00, 0x00, 0xef,
    0xc7, 0x05, 0x00, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xc7, 0x05,
    0x08, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xef, 0xf4, 0x83, 0xff,
    0x02, 0x7c, 0x17, 0x53, 0x57, 0x4f, 0xe8, 0xf3, 0xff, 0xff, 0xff, 0x89,
    0xc3, 0x5f, 0x83, 0xef, 0x02, 0xe8, 0xe8, 0xff, 0xff, 0xff, 0x01, 0xd8,
    0x5b, 0xc3, 0x89, 0xf8, 0xc3,
];

/// Recursive fib in long mode.
//  8000  movslq 0x0,%rdi
//  8008  call   0x805d
//  800d  mov    %rax,0x7f40
//  8015  movq   $0x3,0x7f00
//  8021  movq   $0x7f40,0x7f08
//  802d  movq   $0x8,0x7f10
//  8039  mov    $0xff,%dx
//  803d  mov    $0x7f00,%eax
//  8042  out    %eax,(%dx)
//  8043  movq   $0x0,0x7f00
//  804f  movq   $0x0,0x7f08
//  805b  out    %eax,(%dx)
//  805c  hlt
//  805d  cmp    $0x2,%rdi
//  8061  jl     0x807f
//  8063  push   %rbx
//  8064  push   %rdi
//  8065  dec    %rdi
//  8068  call   0x805d
//  806d  mov    %rax,%rbx
//  8070  pop    %rdi
//  8071  sub    $0x2,%rdi
//  8075  call   0x805d
//  807a  add    %rbx,%rax
//  807d  pop    %rbx
//  807e  ret
//  807f  mov    %rdi,%rax
//  8082  ret
pub const FIB64: &[u8] = &[
    0x48, 0x63, 0x3c, 0x25, 0x00, 0x00, 0x00, 0x00, 0xe8, 0x50, 0x00, 0x00,
    0x00, 0x48, 0x89, 0x04, 0x25, 0x40, 0x7f, 0x00, 0x00, 0x48, 0xc7, 0x04,
    0x25, 0x00, 0x7f, 0x00, 0x00, 0x03, 0x00, 0x00, 0x00, 0x48, 0xc7, 0x04,
    0x25, 0x08, 0x7f, 0x00, 0x00, 0x40, 0x7f, 0x00, 0x00, 0x48, 0xc7, 0x04,
    0x25, 0x10, 0x7f, 0x00, 0x00, 0x08, 0x00, 0x00, 0x00, 0x66, 0xba, 0xff,
    0x00, 0xb8, 0x00, 0x7f, 0x00, 0x00, 0xef, 0x48, 0xc7, 0x04, 0x25, 0x00,
    0x7f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x48, 0xc7, 0x04, 0x25, 0x08,
    0x7f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xef, 0xf4, 0x48, 0x83, 0xff,
    0x02, 0x7c, 0x1c, 0x53, 0x57, 0x48, 0xff, 0xcf, 0xe8, 0xf0, 0xff, 0xff,
    0xff, 0x48, 0x89, 0xc3, 0x5f, 0x48, 0x83, 0xef, 0x02, 0xe8, 0xe3, 0xff,
    0xff, 0xff, 0x48, 0x01, 0xd8, 0x5b, 0xc3, 0x48, 0x89, 0xf8, 0xc3,
];

/// Long-mode fib that requests a snapshot before reading its argument.
//  8000  movq   $0x1,0x7f00
//  800c  mov    $0xff,%dx
//  8010  mov    $0x7f00,%eax
//  8015  out    %eax,(%dx)
//  8016  movslq 0x0,%rdi
//  801e  call   0x8073
//  8023  mov    %rax,0x7f40
//  802b  movq   $0x3,0x7f00
//  8037  movq   $0x7f40,0x7f08
//  8043  movq   $0x8,0x7f10
//  804f  mov    $0xff,%dx
//  8053  mov    $0x7f00,%eax
//  8058  out    %eax,(%dx)
//  8059  movq   $0x0,0x7f00
//  8065  movq   $0x0,0x7f08
//  8071  out    %eax,(%dx)
//  8072  hlt
//  8073  cmp    $0x2,%rdi
//  8077  jl     0x8095
//  8079  push   %rbx
//  807a  push   %rdi
//  807b  dec    %rdi
//  807e  call   0x8073
//  8083  mov    %rax,%rbx
//  8086  pop    %rdi
//  8087  sub    $0x2,%rdi
//  808b  call   0x8073
//  8090  add    %rbx,%rax
//  8093  pop    %rbx
//  8094  ret
//  8095  mov    %rdi,%rax
//  8098  ret
pub const FIB64_SNAPSHOT: &[u8] = &[
    0x48, 0xc7, 0x04, 0x25, 0x00, 0x7f, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00,
    0x66, 0xba, 0xff, 0x00, 0xb8, 0x00, 0x7f, 0x00, 0x00, 0xef, 0x48, 0x63,
    0x3c, 0x25, 0x00, 0x00, 0x00, 0x00, 0xe8, 0x50, 0x00, 0x00, 0x00, 0x48,
    0x89, 0x04, 0x25, 0x40, 0x7f, 0x00, 0x00, 0x48, 0xc7, 0x04, 0x25, 0x00,
    0x7f, 0x00, 0x00, 0x03, 0x00, 0x00, 0x00, 0x48, 0xc7, 0x04, 0x25, 0x08,
    0x7f, 0x00, 0x00, 0x40, 0x7f, 0x00, 0x00, 0x48, 0xc7, 0x04, 0x25, 0x10,
    0x7f, 0x00, 0x00, 0x08, 0x00, 0x00, 0x00, 0x66, 0xba, 0xff, 0x00, 0xb8,
    0x00, 0x7f, 0x00, 0x00, 0xef, 0x48, 0xc7, 0x04, 0x25, 0x00, 0x7f, 0x00,
    0x00, 0x00, 0x00, 0x00, 0x00, 0x48, 0xc7, 0x04, 0x25, 0x08, 0x7f, 0x00,
    0x00, 0x00, 0x00, 0x00, 0x00, 0xef, 0xf4, 0x48, 0x83, 0xff, 0x02, 0x7c,
    0x1c, 0x53, 0x57, 0x48, 0xff, 0xcf, 0xe8, 0xf0, 0xff, 0xff, 0xff, 0x48,
    0x89, 0xc3, 0x5f, 0x48, 0x83, 0xef, 0x02, 0xe8, 0xe3, 0xff, 0xff, 0xff,
    0x48, 0x01, 0xd8, 0x5b, 0xc3, 0x48, 0x89, 0xf8, 0xc3,
];

/// `recv` from fd 0 into 0x6000, `send` it back, exit 0 (exit 1 if recv returned ≤ 0).
//  8000  mov    $0xff,%dx
//  8004  mov    $0x7f00,%eax
//  8009  movq   $0xa,0x7f00
//  8015  movq   $0x0,0x7f08
//  8021  movq   $0x6000,0x7f10
//  802d  movq   $0x1000,0x7f18
//  8039  out    %eax,(%dx)
//  803a  mov    0x7f38,%rcx
//  8042  test   %rcx,%rcx
//  8045  jle    0x8076
//  8047  movq   $0x9,0x7f00
//  8053  mov    %rcx,0x7f18
//  805b  out    %eax,(%dx)
//  805c  movq   $0x0,0x7f00
//  8068  movq   $0x0,0x7f08
//  8074  out    %eax,(%dx)
//  8075  hlt
//  8076  movq   $0x0,0x7f00
//  8082  movq   $0x1,0x7f08
//  808e  out    %eax,(%dx)
//  808f  hlt
pub const ECHO64: &[u8] = &[
    0x66, 0xba, 0xff, 0x00, 0xb8, 0x00, 0x7f, 0x00, 0x00, 0x48, 0xc7, 0x04,
    0x25, 0x00, 0x7f, 0x00, 0x00, 0x0a, 0x00, 0x00, 0x00, 0x48, 0xc7, 0x04,
    0x25, 0x08, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x48, 0xc7, 0x04,
    0x25, 0x10, 0x7f, 0x00, 0x00, 0x00, 0x60, 0x00, 0x00, 0x48, 0xc7, 0x04,
    0x25, 0x18, 0x7f, 0x00, 0x00, 0x00, 0x10, 0x00, 0x00, 0xef, 0x48, 0x8b,
    0x0c, 0x25, 0x38, 0x7f, 0x00, 0x00, 0x48, 0x85, 0xc9, 0x7e, 0x2f, 0x48,
    0xc7, 0x04, 0x25, 0x00, 0x7f, 0x00, 0x00, 0x09, 0x00, 0x00, 0x00, 0x48,
    0x89, 0x0c, 0x25, 0x18, 0x7f, 0x00, 0x00, 0xef, 0x48, 0xc7, 0x04, 0x25,
    0x00, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x48, 0xc7, 0x04, 0x25,
    0x08, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xef, 0xf4, 0x48, 0xc7,
    0x04, 0x25, 0x00, 0x7f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x48, 0xc7,
    0x04, 0x25, 0x08, 0x7f, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0xef, 0xf4,
];

/// Issues `write(1, 0x7f40, 4)` and halts; used to exercise default-deny.
//  8000  movq   $0x5,0x7f00
//  800c  movq   $0x1,0x7f08
//  8018  movq   $0x7f40,0x7f10
//  8024  movq   $0x4,0x7f18
//  8030  mov    $0xff,%dx
//  8034  mov    $0x7f00,%eax
//  8039  out    %eax,(%dx)
//  803a  hlt
pub const DENIED64: &[u8] = &[
    0x48, 0xc7, 0x04, 0x25, 0x00, 0x7f, 0x00, 0x00, 0x05, 0x00, 0x00, 0x00,
    0x48, 0xc7, 0x04, 0x25, 0x08, 0x7f, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00,
    0x48, 0xc7, 0x04, 0x25, 0x10, 0x7f, 0x00, 0x00, 0x40, 0x7f, 0x00, 0x00,
    0x48, 0xc7, 0x04, 0x25, 0x18, 0x7f, 0x00, 0x00, 0x04, 0x00, 0x00, 0x00,
    0x66, 0xba, 0xff, 0x00, 0xb8, 0x00, 0x7f, 0x00, 0x00, 0xef, 0xf4,
];

/// Single `hlt`.
pub const HLT: &[u8] = &[0xf4];

/// `jmp .` forever.
pub const SPIN: &[u8] = &[0xeb, 0xfe];
