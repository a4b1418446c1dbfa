@problemName Toy
@univariate true
@classLabel true a b
@data
0.1,0.9,1.4,2.2,2.6,3.1:a
2.9,2.4,2.1,1.4,0.9,0.4:b
