// Generated machine configuration. Do not edit.
#define IOBASE_TIMER 0x10
#define IOBASE_TTY 0x20
#define IOBASE_DISK 0x30
#define IOBASE_DMA 0x40
#define IRQ_TIMER 0
#define IRQ_TTY 1
#define IRQ_DISK 2
#define IRQ_DMA 3
